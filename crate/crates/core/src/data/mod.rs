//! Datasets, client partitions and the heterogeneity constructions.

mod scenario;
mod split;
mod synthetic;
mod tiny;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use split::{
    dirichlet_proportions, holdout_split, permute_labels, split_dirichlet, split_domains,
    split_iid, Holdout,
};
pub(crate) use split::deal_iid;
pub use scenario::{build_partitions, contiguous_domains, Scenario, ScenarioSpec};
pub use synthetic::{blob_prototypes, make_desk_dataset, BlobParams, DatasetKind};
pub use tiny::{decode_tiny_images, encode_tiny_images, read_tiny_images};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(n, h, w, d)`.
    pub examples: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(examples: Tensor, labels: Vec<usize>, class_count: usize, name: impl Into<String>) -> Result<Self> {
        if examples.shape().len() != 4 {
            return Err(Error::input(format!("examples must be (n, h, w, d), got {:?}", examples.shape())));
        }
        if labels.is_empty() || labels.len() != examples.shape()[0] {
            return Err(Error::input(format!(
                "{} labels for {} examples",
                labels.len(),
                examples.shape()[0]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::input(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Dataset {
            examples,
            labels,
            class_count,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(h, w, d)`.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.examples.shape();
        (s[1], s[2], s[3])
    }

    /// Indices of `pool` grouped by class.
    pub fn by_class(&self, pool: &[usize]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for &i in pool {
            out[self.labels[i]].push(i);
        }
        out
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// One client's view of a parent dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Parent classes visible to this client; the local label of a parent
    /// class is its position here.
    pub classes: Vec<usize>,
    /// Label map over local labels (identity unless permuted).
    pub permutation: Vec<usize>,
    pub domain: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Materialized examples and (already mapped) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl Partition {
    pub fn new(client_id: usize, train: Vec<usize>, classes: Vec<usize>) -> Self {
        let permutation = (0..classes.len()).collect();
        Partition {
            client_id,
            train,
            val: Vec::new(),
            test: Vec::new(),
            classes,
            permutation,
            domain: None,
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn has_identity_permutation(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Label presented to the client for a parent-class label.
    pub fn label_for(&self, parent: usize) -> Option<usize> {
        self.classes
            .iter()
            .position(|&c| c == parent)
            .map(|local| self.permutation[local])
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Gathers examples and applies the client's label map.
    pub fn materialize(&self, d: &Dataset, split: Split) -> Result<TrainSet> {
        let idx = self.indices(split);
        let mut lookup = vec![usize::MAX; d.class_count];
        for (local, &c) in self.classes.iter().enumerate() {
            lookup[c] = self.permutation[local];
        }
        let y = idx
            .iter()
            .map(|&i| {
                let l = lookup[d.labels[i]];
                if l == usize::MAX {
                    Err(Error::input(format!(
                        "client {} holds index {i} of class {} outside its classes",
                        self.client_id, d.labels[i]
                    )))
                } else {
                    Ok(l)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let x = if idx.is_empty() {
            let (h, w, c) = d.input_shape();
            Tensor::zeros(&[0, h, w, c])
        } else {
            d.examples.gather_rows(idx)
        };
        Ok(TrainSet {
            x,
            y,
            classes: self.class_count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub classes: Vec<usize>,
    pub clients_per_domain: usize,
}
