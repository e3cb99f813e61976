use crate::nets::graph::SeqGeom;
use crate::synthgen::ScenarioDataset;
use crate::tensor::Matrix;

/// A mini-batch in the layout the models consume. Sequences are
/// time-major: entry `t * batch + b` is position `t` of sample `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub profiles: Matrix,
    pub events: Vec<u32>,
    pub mask: Vec<f64>,
    pub labels: Vec<f64>,
    /// Teacher probabilities aligned with the rows, for distillation.
    pub soft_targets: Option<Vec<f64>>,
    pub geom: SeqGeom,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.geom.batch
    }

    /// Assembles rows that may come from different datasets.
    pub fn from_refs(items: &[(&ScenarioDataset, usize)]) -> Batch {
        assert!(!items.is_empty(), "empty batch");
        let steps = items[0].0.max_seq_len;
        let pdim = items[0].0.profile_dim();
        let n = items.len();
        let mut profiles = Matrix::zeros(n, pdim);
        let mut events = vec![0u32; steps * n];
        let mut mask = vec![0.0; steps * n];
        let mut labels = Vec::with_capacity(n);
        for (b, (ds, row)) in items.iter().enumerate() {
            assert_eq!(ds.max_seq_len, steps, "mixed sequence lengths in batch");
            profiles.row_mut(b).copy_from_slice(ds.profiles.row(*row));
            for (t, (&e, &m)) in ds.events(*row).iter().zip(ds.mask(*row)).enumerate() {
                events[t * n + b] = e;
                mask[t * n + b] = m as f64;
            }
            labels.push(ds.labels[*row] as f64);
        }
        Batch {
            profiles,
            events,
            mask,
            labels,
            soft_targets: None,
            geom: SeqGeom { steps, batch: n },
        }
    }

    pub fn from_rows(ds: &ScenarioDataset, rows: &[usize]) -> Batch {
        let items: Vec<_> = rows.iter().map(|&r| (ds, r)).collect();
        Batch::from_refs(&items)
    }

    pub fn with_soft_targets(mut self, soft: Vec<f64>) -> Batch {
        assert_eq!(soft.len(), self.size(), "soft target length mismatch");
        self.soft_targets = Some(soft);
        self
    }
}
