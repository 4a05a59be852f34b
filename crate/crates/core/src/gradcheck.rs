//! Finite-difference oracle for analytic gradients.
//!
//! A [`GradCase`] owns a set of leaf tensors and a forward closure that maps
//! their *current* contents to a scalar loss; perturbing a leaf and calling
//! the closure again is therefore a pure function evaluation. The numeric
//! reference is always computed in f64 with central differences. An f32
//! model is checked against an f64 twin built from the same seed (inits are
//! quantized through f32, so the twins start bit-equivalent): all-f32
//! differencing would drown the comparison in rounding noise at the 1e-4
//! level this crate promises.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::rng::derived;
use crate::tensor::{Element, Tensor};

pub struct GradCase<T: Element> {
    pub leaves: Vec<(String, Tensor<T>)>,
    pub forward: Box<dyn Fn() -> Result<Tensor<T>>>,
}

impl<T: Element> GradCase<T> {
    pub fn eval(&self) -> Result<f64> {
        let out = (self.forward)()?;
        if out.numel() != 1 {
            return Err(shape_err("grad case forward must produce a scalar"));
        }
        Ok(out.item().as_f64())
    }

    /// Analytic gradient per leaf, as f64, zeros where backward never
    /// reached the leaf.
    pub fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        for (_, leaf) in &self.leaves {
            leaf.zero_grad();
        }
        let out = (self.forward)()?;
        out.backward()?;
        Ok(self
            .leaves
            .iter()
            .map(|(_, leaf)| match leaf.grad() {
                Some(g) => g.iter().map(|v| v.as_f64()).collect(),
                None => vec![0.0; leaf.numel()],
            })
            .collect())
    }
}

/// Which flat components of each leaf to probe. `limit` caps the count per
/// leaf (sampled without replacement from a fixed stream) so cases with
/// large parameter tables stay affordable; `None` probes everything.
pub fn pick_components<T: Element>(
    leaves: &[(String, Tensor<T>)],
    limit: Option<usize>,
) -> Vec<Vec<usize>> {
    leaves
        .iter()
        .enumerate()
        .map(|(li, (_, leaf))| {
            let n = leaf.numel();
            match limit {
                Some(k) if k < n => {
                    let mut rng = derived(0x5eed, &[li as u64, n as u64]);
                    let mut idx: Vec<usize> = (0..n).collect();
                    for i in 0..k {
                        let j = i + rng.random_range(0..n - i);
                        idx.swap(i, j);
                    }
                    let mut picked = idx[..k].to_vec();
                    picked.sort_unstable();
                    picked
                }
                _ => (0..n).collect(),
            }
        })
        .collect()
}

/// Central differences on the f64 case at the picked components.
pub fn fd_f64(case: &GradCase<f64>, picks: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(picks.len());
    for ((_, leaf), pick) in case.leaves.iter().zip(picks) {
        let mut derivs = Vec::with_capacity(pick.len());
        for &i in pick {
            let x0 = leaf.at(i);
            let h = 6.0554544523933395e-6 * x0.abs().max(1.0); // cbrt(f64 eps) scale
            leaf.set_at(i, x0 + h);
            let fp = case.eval()?;
            leaf.set_at(i, x0 - h);
            let fm = case.eval()?;
            leaf.set_at(i, x0);
            derivs.push((fp - fm) / (2.0 * h));
        }
        out.push(derivs);
    }
    Ok(out)
}

/// Noise scale of an f64 analytic pass and of the central differences:
/// components below this on both sides are rounding dust.
pub const NOISE64: f64 = 1e-8;
/// Same for an f32 analytic pass, whose dust is ~eps_f32 per operation.
pub const NOISE32: f64 = 1e-4;

/// `||a - b|| / max(||a||, ||b||, 1e-12)` over aligned components, skipping
/// components where both sides sit below `noise`. A structurally zero
/// derivative — e.g. the key bias under softmax, which shifts every score
/// in a row equally — leaves rounding dust in the analytic pass and
/// truncation noise in the numeric one; comparing dust against noise is
/// vacuous, not a gradient defect. Components with real signal on either
/// side are always compared.
pub fn rel_err(a: &[f64], b: &[f64], noise: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        if x.abs() < noise && y.abs() < noise {
            continue;
        }
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

#[derive(Debug, Clone)]
pub struct PrecisionReport {
    /// Worst per-leaf relative error, f32 analytic vs f64 numeric.
    pub rel32: f64,
    /// Worst per-leaf relative error, f64 analytic vs f64 numeric.
    pub rel64: f64,
    pub worst_leaf: String,
    pub components: usize,
}

/// Check an f32/f64 twin pair against the f64 numeric oracle. The twins
/// must enumerate the same leaves in the same order with the same shapes.
pub fn check_pair(
    case32: &GradCase<f32>,
    case64: &GradCase<f64>,
    per_leaf_limit: Option<usize>,
) -> Result<PrecisionReport> {
    if case32.leaves.len() != case64.leaves.len() {
        return Err(shape_err("grad twins disagree on leaf count"));
    }
    for ((n32, l32), (n64, l64)) in case32.leaves.iter().zip(&case64.leaves) {
        if n32 != n64 || l32.numel() != l64.numel() {
            return Err(shape_err(format!("grad twins disagree on leaf {n32}/{n64}")));
        }
    }
    let picks = pick_components(&case64.leaves, per_leaf_limit);
    let a32 = case32.analytic()?;
    let a64 = case64.analytic()?;
    let fd = fd_f64(case64, &picks)?;
    let mut report = PrecisionReport {
        rel32: 0.0,
        rel64: 0.0,
        worst_leaf: String::new(),
        components: 0,
    };
    for (li, pick) in picks.iter().enumerate() {
        if pick.is_empty() {
            continue;
        }
        let sel32: Vec<f64> = pick.iter().map(|&i| a32[li][i]).collect();
        let sel64: Vec<f64> = pick.iter().map(|&i| a64[li][i]).collect();
        let r32 = rel_err(&sel32, &fd[li], NOISE32);
        let r64 = rel_err(&sel64, &fd[li], NOISE64);
        if r32 > report.rel32 {
            report.rel32 = r32;
            report.worst_leaf = case32.leaves[li].0.clone();
        }
        report.rel64 = report.rel64.max(r64);
        report.components += pick.len();
    }
    Ok(report)
}

/// f64-only convenience for op-level unit tests: every component probed.
pub fn check_f64(case: &GradCase<f64>) -> Result<f64> {
    let picks = pick_components(&case.leaves, None);
    let analytic = case.analytic()?;
    let fd = fd_f64(case, &picks)?;
    let mut worst: f64 = 0.0;
    for (li, pick) in picks.iter().enumerate() {
        let sel: Vec<f64> = pick.iter().map(|&i| analytic[li][i]).collect();
        worst = worst.max(rel_err(&sel, &fd[li], NOISE64));
    }
    Ok(worst)
}
