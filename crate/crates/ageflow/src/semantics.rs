//! Prototype statistics over the packed latent space, semantic
//! manipulation by prototype differences, and the distillation target/loss
//! that teaches the translation module the aging direction while holding
//! the other attribute fixed.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Mean packed latent for every (age group, attribute value) pair.
#[derive(Debug, Clone)]
pub struct PrototypeTable<F> {
    pub groups: usize,
    pub attrs: usize,
    cells: BTreeMap<(usize, usize), (Tensor<F>, usize)>,
}

impl<F: Scalar> PrototypeTable<F> {
    /// Arithmetic mean per (group, attribute) cell.
    pub fn compute(
        latents: &[Tensor<F>],
        age_labels: &[usize],
        attr_labels: &[usize],
        groups: usize,
        attrs: usize,
    ) -> Result<Self> {
        if latents.len() != age_labels.len() || latents.len() != attr_labels.len() {
            return Err(Error::invalid("prototype inputs must have equal lengths"));
        }
        let mut sums: BTreeMap<(usize, usize), (Tensor<F>, usize)> = BTreeMap::new();
        for ((z, &g), &a) in latents.iter().zip(age_labels).zip(attr_labels) {
            if g >= groups || a >= attrs {
                return Err(Error::invalid(format!("label out of range: group {g}, attr {a}")));
            }
            match sums.get_mut(&(g, a)) {
                Some((acc, count)) => {
                    acc.add_assign(z);
                    *count += 1;
                }
                None => {
                    sums.insert((g, a), (z.clone(), 1));
                }
            }
        }
        let cells = sums
            .into_iter()
            .map(|(key, (sum, count))| {
                let mean = sum.scale(F::from_f64(1.0 / count as f64));
                (key, (mean, count))
            })
            .collect();
        Ok(PrototypeTable { groups, attrs, cells })
    }

    pub fn from_cells(groups: usize, attrs: usize, cells: Vec<((usize, usize), (Tensor<F>, usize))>) -> Self {
        PrototypeTable { groups, attrs, cells: cells.into_iter().collect() }
    }

    pub fn get(&self, group: usize, attr: usize) -> Result<&Tensor<F>> {
        self.cells
            .get(&(group, attr))
            .map(|(t, _)| t)
            .ok_or(Error::MissingPrototype { group, attr })
    }

    pub fn count(&self, group: usize, attr: usize) -> usize {
        self.cells.get(&(group, attr)).map(|(_, c)| *c).unwrap_or(0)
    }

    pub fn populated(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cells.keys().copied()
    }

    /// Cells that training requires but the table lacks.
    pub fn require_all(&self) -> Result<()> {
        for g in 0..self.groups {
            for a in 0..self.attrs {
                if !self.cells.contains_key(&(g, a)) {
                    return Err(Error::MissingPrototype { group: g, attr: a });
                }
            }
        }
        Ok(())
    }

    /// Count-weighted mean over attribute cells: the group-only prototype
    /// used by the attribute-blind manipulation mode.
    pub fn group_marginal(&self, group: usize) -> Result<Tensor<F>> {
        let mut total = 0usize;
        let mut acc: Option<Tensor<F>> = None;
        for a in 0..self.attrs {
            if let Some((mean, count)) = self.cells.get(&(group, a)) {
                let weighted = mean.scale(F::from_f64(*count as f64));
                match &mut acc {
                    Some(t) => t.add_assign(&weighted),
                    None => acc = Some(weighted),
                }
                total += count;
            }
        }
        let acc = acc.ok_or(Error::MissingPrototype { group, attr: 0 })?;
        Ok(acc.scale(F::from_f64(1.0 / total as f64)))
    }
}

/// z' = z + s * (z_pos - z_neg): move a latent along a prototype direction.
pub fn manipulate<F: Scalar>(
    z: &Tensor<F>,
    z_pos: &Tensor<F>,
    z_neg: &Tensor<F>,
    s: f64,
) -> Result<Tensor<F>> {
    if z.shape() != z_pos.shape() || z.shape() != z_neg.shape() {
        return Err(Error::shape(format!(
            "manipulate shapes differ: {:?} / {:?} / {:?}",
            z.shape(),
            z_pos.shape(),
            z_neg.shape()
        )));
    }
    let sf = F::from_f64(s);
    Ok(z.zip_map(&z_pos.sub(z_neg), |zi, d| zi + sf * d))
}

/// Distillation target: the source latent moved from its group's prototype
/// to the target group's prototype at the same attribute value.
pub fn akd_target<F: Scalar>(
    z: &Tensor<F>,
    table: &PrototypeTable<F>,
    g_src: usize,
    g_tgt: usize,
    attr: usize,
    s: f64,
) -> Result<Tensor<F>> {
    let pos = table.get(g_tgt, attr)?;
    let neg = table.get(g_src, attr)?;
    manipulate(z, pos, neg, s)
}

/// Mean absolute difference over all elements (L1).
pub fn akd_loss<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>) -> f64 {
    assert_eq!(pred.shape(), target.shape(), "akd_loss shape mismatch");
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p.as_f64() - t.as_f64()).abs())
        .sum();
    sum / pred.len() as f64
}

/// d(akd_loss)/d(pred): sign(pred - target) / n.
pub fn akd_loss_backward<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>) -> Tensor<F> {
    let inv = F::from_f64(1.0 / pred.len() as f64);
    pred.zip_map(target, |p, t| {
        if p > t {
            inv
        } else if p < t {
            -inv
        } else {
            F::zero()
        }
    })
}
