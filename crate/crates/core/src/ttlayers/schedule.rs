use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which part of the parallel TT block is evaluated at one timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchStep {
    /// Both the vertical `K x 1` and horizontal `1 x K` branches.
    Full,
    HalfVertical,
    HalfHorizontal,
}

impl BranchStep {
    pub fn uses_vertical(self) -> bool {
        matches!(self, BranchStep::Full | BranchStep::HalfVertical)
    }

    pub fn uses_horizontal(self) -> bool {
        matches!(self, BranchStep::Full | BranchStep::HalfHorizontal)
    }

    pub fn is_half(self) -> bool {
        self != BranchStep::Full
    }
}

/// Where the full-path timesteps sit inside the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Full steps first, half steps last (`FFHH` for T = 4).
    #[default]
    EarlyFull,
    /// `HHFF`.
    LateFull,
    /// Half and full interleaved, starting with half (`HFHF`).
    AlternatingHalfFirst,
    /// `FHFH`.
    AlternatingFullFirst,
}

/// Which branch a half timestep keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HalfBranch {
    #[default]
    Vertical,
    Horizontal,
    /// Vertical on the first half step, horizontal on the next, and so on.
    Alternating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttConfig {
    /// Number of half timesteps; `None` means `T / 2`.
    #[serde(default)]
    pub n_half: Option<usize>,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub half_branch: HalfBranch,
}

impl Default for HttConfig {
    fn default() -> Self {
        Self { n_half: None, placement: Placement::EarlyFull, half_branch: HalfBranch::Vertical }
    }
}

impl HttConfig {
    pub fn build(&self, t_steps: usize) -> Result<HttSchedule> {
        build_htt_schedule(t_steps, self.n_half.unwrap_or(t_steps / 2), self.placement, self.half_branch)
    }
}

/// Per-timestep branch selection of a hybrid TT layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttSchedule {
    steps: Vec<BranchStep>,
}

impl HttSchedule {
    pub fn from_steps(steps: Vec<BranchStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("HTT schedule must cover at least one timestep".into()));
        }
        if steps.iter().all(|s| s.is_half()) {
            return Err(Error::Config("HTT schedule needs at least one full timestep".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[BranchStep] {
        &self.steps
    }

    pub fn t_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn n_half(&self) -> usize {
        self.steps.iter().filter(|s| s.is_half()).count()
    }

    pub fn at(&self, t: usize) -> Result<BranchStep> {
        self.steps
            .get(t)
            .copied()
            .ok_or_else(|| Error::Contract(format!("timestep {t} outside HTT schedule of length {}", self.steps.len())))
    }

    /// Compact notation such as `FFHH`.
    pub fn pattern(&self) -> String {
        self.steps.iter().map(|s| if s.is_half() { 'H' } else { 'F' }).collect()
    }
}

pub fn build_htt_schedule(
    t_steps: usize,
    n_half: usize,
    placement: Placement,
    half_branch: HalfBranch,
) -> Result<HttSchedule> {
    if t_steps == 0 {
        return Err(Error::Config("t_steps must be positive".into()));
    }
    if n_half >= t_steps {
        return Err(Error::Config(format!("n_half = {n_half} leaves no full timestep out of {t_steps}")));
    }
    let half_at: Vec<bool> = match placement {
        Placement::EarlyFull => (0..t_steps).map(|t| t >= t_steps - n_half).collect(),
        Placement::LateFull => (0..t_steps).map(|t| t < n_half).collect(),
        Placement::AlternatingHalfFirst | Placement::AlternatingFullFirst => {
            let first = usize::from(placement == Placement::AlternatingFullFirst);
            let slots: Vec<usize> = (first..t_steps).step_by(2).collect();
            if slots.len() < n_half {
                return Err(Error::Config(format!(
                    "{placement:?} fits at most {} half steps in T = {t_steps}, asked for {n_half}",
                    slots.len()
                )));
            }
            let mut v = vec![false; t_steps];
            for &t in &slots[..n_half] {
                v[t] = true;
            }
            v
        }
    };
    let mut k = 0;
    let steps = half_at
        .into_iter()
        .map(|half| {
            if !half {
                return BranchStep::Full;
            }
            let vertical = match half_branch {
                HalfBranch::Vertical => true,
                HalfBranch::Horizontal => false,
                HalfBranch::Alternating => k % 2 == 0,
            };
            k += 1;
            if vertical {
                BranchStep::HalfVertical
            } else {
                BranchStep::HalfHorizontal
            }
        })
        .collect();
    HttSchedule::from_steps(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pat(p: Placement) -> String {
        build_htt_schedule(4, 2, p, HalfBranch::Vertical).unwrap().pattern()
    }

    #[test]
    fn four_step_placements() {
        assert_eq!(pat(Placement::EarlyFull), "FFHH");
        assert_eq!(pat(Placement::LateFull), "HHFF");
        assert_eq!(pat(Placement::AlternatingHalfFirst), "HFHF");
        assert_eq!(pat(Placement::AlternatingFullFirst), "FHFH");
    }

    #[test]
    fn default_config_is_ffhh() {
        let s = HttConfig::default().build(4).unwrap();
        assert_eq!(s.pattern(), "FFHH");
        assert_eq!(s.at(3).unwrap(), BranchStep::HalfVertical);
        assert!(s.at(4).is_err());
    }

    #[test]
    fn alternating_branches() {
        let s = build_htt_schedule(6, 3, Placement::EarlyFull, HalfBranch::Alternating).unwrap();
        assert_eq!(s.steps()[3..], [BranchStep::HalfVertical, BranchStep::HalfHorizontal, BranchStep::HalfVertical]);
    }

    #[test]
    fn rejects_all_half() {
        assert!(build_htt_schedule(4, 4, Placement::EarlyFull, HalfBranch::Vertical).is_err());
        assert!(build_htt_schedule(0, 0, Placement::EarlyFull, HalfBranch::Vertical).is_err());
        assert!(HttSchedule::from_steps(vec![BranchStep::HalfVertical]).is_err());
        assert!(build_htt_schedule(4, 3, Placement::AlternatingFullFirst, HalfBranch::Vertical).is_err());
    }

    #[test]
    fn zero_half_is_all_full() {
        let s = build_htt_schedule(3, 0, Placement::LateFull, HalfBranch::Horizontal).unwrap();
        assert_eq!(s.pattern(), "FFF");
    }
}
