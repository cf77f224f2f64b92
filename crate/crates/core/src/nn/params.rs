use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Read-only traversal of the trainable tensors of an object, in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &[f64]));
}

/// Mutable traversal; must visit tensors in the same order as [`Params::visit`].
pub trait ParamsMut: Params {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut [f64]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

impl ParamEntry {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat copy of every trainable scalar with a stable name index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub entries: Vec<ParamEntry>,
}

impl ParamVector {
    pub fn flatten<P: Params + ?Sized>(params: &P) -> Self {
        let mut values = Vec::new();
        let mut entries = Vec::new();
        params.visit("", &mut |name, kind, data| {
            entries.push(ParamEntry {
                name: name.to_string(),
                kind,
                offset: values.len(),
                len: data.len(),
            });
            values.extend_from_slice(data);
        });
        Self { values, entries }
    }

    /// Copies the values back into `params`, which must have the same layout.
    pub fn unflatten_into<P: ParamsMut + ?Sized>(&self, params: &mut P) -> Result<()> {
        let mut idx = 0;
        let mut failure = None;
        params.visit_mut("", &mut |name, _, data| {
            if failure.is_some() {
                return;
            }
            match self.entries.get(idx) {
                Some(entry) if entry.name == name && entry.len == data.len() => {
                    data.copy_from_slice(&self.values[entry.range()]);
                }
                Some(entry) => {
                    failure = Some(format!(
                        "parameter layout mismatch at {name}: vector holds {} ({} values), target has {} values",
                        entry.name,
                        entry.len,
                        data.len()
                    ));
                }
                None => failure = Some(format!("parameter vector has no entry for {name}")),
            }
            idx += 1;
        });
        if let Some(msg) = failure {
            return Err(Error::Validation(msg));
        }
        if idx != self.entries.len() {
            return Err(Error::dim("parameter entries", self.entries.len(), idx));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            entries: self.entries.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entry(name).map(|e| &self.values[e.range()])
    }

    /// Boolean mask over scalars, true where `pred` holds for the owning entry.
    pub fn mask(&self, pred: impl Fn(&ParamEntry) -> bool) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for entry in self.entries.iter().filter(|e| pred(e)) {
            mask[entry.range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.entries == other.entries
    }
}

/// `lambda · Σ w²` over weight entries accepted by `include`; biases never count.
pub fn l2_penalty(
    params: &ParamVector,
    include: impl Fn(&ParamEntry) -> bool,
    lambda: f64,
) -> (f64, ParamVector) {
    let mut grad = params.zeros_like();
    let mut value = 0.0;
    if lambda == 0.0 {
        return (0.0, grad);
    }
    for entry in params
        .entries
        .iter()
        .filter(|e| e.kind == ParamKind::Weight && include(e))
    {
        for k in entry.range() {
            let w = params.values[k];
            value += w * w;
            grad.values[k] = 2.0 * lambda * w;
        }
    }
    (lambda * value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Activation, DenseLayer};
    use crate::rng::substream;

    fn layer() -> DenseLayer {
        DenseLayer::glorot(3, 2, Activation::Tanh, &mut substream(3, "test", 0))
    }

    #[test]
    fn flatten_unflatten_round_trip_is_bit_exact() {
        let original = layer();
        let flat = ParamVector::flatten(&original);
        let mut target = DenseLayer::zeros(3, 2, Activation::Tanh);
        flat.unflatten_into(&mut target).unwrap();
        assert_eq!(target, original);
        assert_eq!(ParamVector::flatten(&target), flat);
        assert_eq!(flat.entries[0].name, "weights");
        assert_eq!(flat.entries[1].name, "bias");
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let flat = ParamVector::flatten(&layer());
        let mut target = DenseLayer::zeros(4, 2, Activation::Tanh);
        assert!(flat.unflatten_into(&mut target).is_err());
    }

    #[test]
    fn l2_zero_lambda() {
        let flat = ParamVector::flatten(&layer());
        let (value, grad) = l2_penalty(&flat, |_| true, 0.0);
        assert_eq!(value, 0.0);
        assert!(grad.values.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn l2_single_weight() {
        let params = ParamVector {
            values: vec![2.0, 5.0],
            entries: vec![
                ParamEntry {
                    name: "w".into(),
                    kind: ParamKind::Weight,
                    offset: 0,
                    len: 1,
                },
                ParamEntry {
                    name: "b".into(),
                    kind: ParamKind::Bias,
                    offset: 1,
                    len: 1,
                },
            ],
        };
        let (value, grad) = l2_penalty(&params, |_| true, 0.01);
        assert!((value - 0.04).abs() < 1e-15);
        assert!((grad.values[0] - 0.04).abs() < 1e-15);
        assert_eq!(grad.values[1], 0.0);
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let mut flat = ParamVector::flatten(&layer());
        // biases must be non-zero to confirm they are excluded
        let len = flat.values.len();
        flat.values[len - 1] = 0.7;
        let template = flat.clone();
        let lambda = 0.37;
        let report = grad_check(
            |theta| {
                let mut p = template.clone();
                p.values.copy_from_slice(theta);
                l2_penalty(&p, |_| true, lambda).0
            },
            |theta| {
                let mut p = template.clone();
                p.values.copy_from_slice(theta);
                l2_penalty(&p, |_| true, lambda).1.values
            },
            &flat.values,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
