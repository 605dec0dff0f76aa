//! Rank selection for TT layers: global empirical variational Bayesian matrix factorisation,
//! a cumulative-energy rule, and fixed published rank lists.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{circular_permute_last, singular_values, DenseTensor};

/// Published per-layer ranks of the decomposed ResNet18 (16 layers).
pub const PAPER_RESNET18: [usize; 16] = [24, 27, 25, 29, 37, 45, 43, 41, 65, 74, 70, 63, 104, 153, 186, 145];

/// Published per-layer ranks of the decomposed ResNet34 (32 layers).
pub const PAPER_RESNET34: [usize; 32] = [
    24, 23, 22, 17, 16, 12, 22, 31, 25, 25, 24, 21, 20, 19, 48, 79, 64, 69, 63, 69, 60, 65, 63, 63, 62, 58, 121, 170,
    173, 147, 161, 108,
];

/// Desk-scale ranks for the four decomposable layers of `tiny6`.
pub const TINY6: [usize; 4] = [8, 12, 16, 24];

pub fn rank_preset(name: &str) -> Option<Vec<usize>> {
    match name {
        "tiny6" => Some(TINY6.to_vec()),
        "paper-resnet18" => Some(PAPER_RESNET18.to_vec()),
        "paper-resnet34" => Some(PAPER_RESNET34.to_vec()),
        _ => None,
    }
}

/// How a rank was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMethod {
    Evbmf,
    /// EVBMF was degenerate (e.g. the noise-variance search interval collapsed); the
    /// 95% cumulative-energy rule was used instead.
    EnergyFallback,
    EnergyThreshold,
    FixedList,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub rank: usize,
    /// Estimated noise variance; zero when no noise model was fitted.
    pub sigma2: f64,
    /// Singular values of the retained components, descending.
    pub retained: Vec<f64>,
    pub method: RankMethod,
}

const FALLBACK_ENERGY: f64 = 0.95;
const TAU_BAR_COEF: f64 = 2.5129;

/// Analytic global EVBMF rank of an `L x M` matrix.
///
/// The noise variance is the minimiser of the EVB free energy over its admissible interval;
/// components whose singular value exceeds `sqrt(M sigma2 (1 + tau)(1 + alpha / tau))` are kept.
pub fn evbmf_rank<T: Real>(m: &DenseTensor<T>) -> Result<RankEstimate> {
    m.expect_ndim(2)?;
    if !m.is_finite() {
        return Err(Error::Input("non-finite matrix entry".into()));
    }
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let (l, mm) = if r <= c { (r, c) } else { (c, r) };
    if l == 0 {
        return Ok(RankEstimate { rank: 0, sigma2: 0.0, retained: vec![], method: RankMethod::Evbmf });
    }
    let s = singular_values(m)?;
    let total_sq: f64 = m.data().iter().map(|v| v.as_f64().powi(2)).sum();
    if total_sq == 0.0 || s[0] == 0.0 {
        return Ok(RankEstimate { rank: 0, sigma2: 0.0, retained: vec![], method: RankMethod::Evbmf });
    }
    let (lf, mf) = (l as f64, mm as f64);
    let alpha = lf / mf;
    let tau_bar = TAU_BAR_COEF * alpha.sqrt();
    let xubar = (1.0 + tau_bar) * (1.0 + alpha / tau_bar);

    let h = s.len();
    let residual = (total_sq - s.iter().map(|v| v * v).sum::<f64>()).max(0.0);
    let e_ub = ((lf / (1.0 + alpha)).ceil() as usize).saturating_sub(1).min(h).min(h - 1);
    let upper = (s.iter().map(|v| v * v).sum::<f64>() + residual) / (lf * mf);
    let tail = &s[e_ub..];
    let tail_mean = tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64;
    let lower = (s[e_ub].powi(2) / (mf * xubar)).max(tail_mean / mf);

    if !(lower > upper * 1e-12) || lower >= upper {
        return Ok(energy_estimate(&s, FALLBACK_ENERGY, RankMethod::EnergyFallback));
    }
    let obj = |sigma2: f64| evb_free_energy(sigma2, lf, mf, &s, residual, xubar);
    let sigma2 = minimise_bounded(obj, lower, upper);
    let threshold = (mf * sigma2 * xubar).sqrt();
    let retained: Vec<f64> = s.iter().copied().filter(|&v| v > threshold).collect();
    Ok(RankEstimate { rank: retained.len(), sigma2, retained, method: RankMethod::Evbmf })
}

fn evb_free_energy(sigma2: f64, l: f64, m: f64, s: &[f64], residual: f64, xubar: f64) -> f64 {
    let alpha = l / m;
    let h = s.len() as f64;
    let mut obj = 0.0;
    for &sv in s {
        let x = sv * sv / (m * sigma2);
        if x > xubar {
            let d = x - (1.0 + alpha);
            let tau = 0.5 * (d + (d * d - 4.0 * alpha).max(0.0).sqrt());
            obj += x - tau + ((tau + 1.0) / x).ln() + alpha * (tau / alpha + 1.0).ln();
        } else if x > 0.0 {
            obj += x - x.ln();
        } else {
            // exact zero singular value: the term diverges identically for every sigma2, so
            // it carries no information about the minimiser
        }
    }
    obj + residual / (m * sigma2) + (l - h) * sigma2.ln()
}

/// Bounded scalar minimisation: a log-spaced scan to bracket the global basin, then Brent's
/// method inside the bracket.
fn minimise_bounded(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    const GRID: usize = 64;
    let (llo, lhi) = (lo.ln(), hi.ln());
    let pts: Vec<f64> = (0..=GRID).map(|i| (llo + (lhi - llo) * i as f64 / GRID as f64).exp()).collect();
    let vals: Vec<f64> = pts.iter().map(|&p| f(p)).collect();
    let best = vals
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(GRID / 2, |(i, _)| i);
    let a = pts[best.saturating_sub(1)];
    let b = pts[(best + 1).min(GRID)];
    let x = brent(&f, a, b, 1e-10 * hi, 200);
    if f(x) <= vals[best] {
        x
    } else {
        pts[best]
    }
}

/// Brent's bounded minimiser (golden section with parabolic steps).
fn brent(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, abs_tol: f64, max_iter: usize) -> f64 {
    let golden = 0.5 * (3.0 - 5f64.sqrt());
    let mut x = a + golden * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..max_iter {
        let mid = 0.5 * (a + b);
        let tol1 = 1.5e-8 * x.abs() + abs_tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - mid).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden_step = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if (u - a) < tol2 || (b - u) < tol2 {
                    d = if x < mid { tol1 } else { -tol1 };
                }
                golden_step = false;
            }
        }
        if golden_step {
            e = if x >= mid { a - x } else { b - x };
            d = golden * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv, w, fw, x, fx) = (w, fw, x, fx, u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv, w, fw) = (w, fw, u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    x
}

fn energy_estimate(s: &[f64], energy: f64, method: RankMethod) -> RankEstimate {
    let r = energy_rank(s, energy);
    RankEstimate { rank: r, sigma2: 0.0, retained: s[..r].to_vec(), method }
}

/// Smallest `r` whose leading squared singular values hold at least `energy` of the total.
pub fn energy_rank(s: &[f64], energy: f64) -> usize {
    let total: f64 = s.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, v) in s.iter().enumerate() {
        acc += v * v;
        if acc >= energy * total * (1.0 - 1e-12) {
            return i + 1;
        }
    }
    s.len()
}

/// Which matricisation of the permuted `(I, K, K, O)` kernel the estimator sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unfolding {
    /// `I x (K K O)`, the first TT cut.
    First,
    /// `(I K) x (K O)`, the middle cut.
    #[default]
    Middle,
    /// `(I K K) x O`, the last cut.
    Last,
}

impl Unfolding {
    pub fn apply<T: Real>(self, w: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        let p = circular_permute_last(w)?;
        let [i, k1, k2, o] = [p.shape()[0], p.shape()[1], p.shape()[2], p.shape()[3]];
        let (rows, cols) = match self {
            Unfolding::First => (i, k1 * k2 * o),
            Unfolding::Middle => (i * k1, k2 * o),
            Unfolding::Last => (i * k1 * k2, o),
        };
        p.reshape(&[rows, cols])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RankPolicy {
    FixedList {
        ranks: Vec<usize>,
    },
    Vbmf {
        #[serde(default)]
        unfolding: Unfolding,
    },
    EnergyThreshold {
        energy: f64,
        #[serde(default)]
        unfolding: Unfolding,
    },
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            RankPolicy::FixedList { ranks } if ranks.contains(&0) => {
                Err(Error::Config("fixed rank list contains a zero rank".into()))
            }
            RankPolicy::EnergyThreshold { energy, .. } if !(*energy > 0.0 && *energy <= 1.0) => {
                Err(Error::Config(format!("energy threshold must lie in (0, 1], got {energy}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RankPolicy::FixedList { .. } => "fixed-list",
            RankPolicy::Vbmf { .. } => "vbmf",
            RankPolicy::EnergyThreshold { .. } => "energy-threshold",
        }
    }
}

/// Rank assigned to one decomposable layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    pub rank: usize,
    pub method: RankMethod,
    /// Estimator output before clamping, when an estimator ran.
    pub estimate: Option<RankEstimate>,
}

/// Single rank `r` (used as `r1 = r2 = r3`) for the `layer_index`-th decomposable layer with
/// weight `w (O, I, K, K)`. Always at least 1 and at most the rank of the chosen unfolding.
pub fn estimate_layer_rank<T: Real>(w: &DenseTensor<T>, policy: &RankPolicy, layer_index: usize) -> Result<LayerRank> {
    w.expect_ndim(4)?;
    policy.validate()?;
    let clamp = |r: usize, unfolding: Unfolding| -> Result<usize> {
        let u = unfolding.apply(w)?;
        Ok(r.clamp(1, u.shape()[0].min(u.shape()[1])))
    };
    match policy {
        RankPolicy::FixedList { ranks } => {
            let r = *ranks.get(layer_index).ok_or_else(|| {
                Error::Config(format!("rank list has {} entries, layer {layer_index} requested", ranks.len()))
            })?;
            Ok(LayerRank { rank: r, method: RankMethod::FixedList, estimate: None })
        }
        RankPolicy::Vbmf { unfolding } => {
            let est = evbmf_rank(&unfolding.apply(w)?)?;
            Ok(LayerRank { rank: clamp(est.rank, *unfolding)?, method: est.method, estimate: Some(est) })
        }
        RankPolicy::EnergyThreshold { energy, unfolding } => {
            let s = singular_values(&unfolding.apply(w)?)?;
            let est = energy_estimate(&s, *energy, RankMethod::EnergyThreshold);
            Ok(LayerRank { rank: clamp(est.rank, *unfolding)?, method: est.method, estimate: Some(est) })
        }
    }
}

/// Reads a rank list stored as a JSON array of positive integers.
pub fn load_rank_list(path: &Path) -> Result<Vec<usize>> {
    let ranks: Vec<usize> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ranks.contains(&0) {
        return Err(Error::Config(format!("{}: rank list contains a zero rank", path.display())));
    }
    Ok(ranks)
}

pub fn save_rank_list(path: &Path, ranks: &[usize]) -> Result<()> {
    crate::tensor::io::write_atomic(path, serde_json::to_string(ranks)?.as_bytes())
}
