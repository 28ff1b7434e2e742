//! Affine strategy profiles `a^i_t = L^i_t v̂^i_t + M^i_t f_t + c^i_t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::linalg::{self, serde_rows};
use crate::GameSpec;

/// One player's affine rule at one stage. `m_f` acts on the stacked public
/// offsets of all players; `M f + c` is the publicly computable offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineStrategy {
    #[serde(with = "serde_rows")]
    pub l_mat: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub m_f: DMatrix<f64>,
    pub m_const: Vec<f64>,
}

impl AffineStrategy {
    pub fn zeros(layout: &Layout) -> Self {
        Self {
            l_mat: DMatrix::zeros(layout.na, layout.nv),
            m_f: DMatrix::zeros(layout.na, layout.n_f()),
            m_const: vec![0.0; layout.na],
        }
    }

    pub fn constant(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.m_const)
    }

    /// Public part of the action, `M f + c`.
    pub fn offset(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.m_f * f + self.constant()
    }

    pub fn action(&self, v_hat: &DVector<f64>, f: &DVector<f64>) -> DVector<f64> {
        &self.l_mat * v_hat + self.offset(f)
    }

    pub fn sup_diff(&self, other: &Self) -> f64 {
        let c = self
            .m_const
            .iter()
            .zip(&other.m_const)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        linalg::max_abs_diff(&self.l_mat, &other.l_mat)
            .max(linalg::max_abs_diff(&self.m_f, &other.m_f))
            .max(c)
    }

    fn is_finite(&self) -> bool {
        self.l_mat.iter().chain(self.m_f.iter()).chain(&self.m_const).all(|x| x.is_finite())
    }
}

/// Strategies for every stage and player, indexed `[stage][player]` with
/// stages counted from zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyProfile {
    pub stages: Vec<Vec<AffineStrategy>>,
}

impl StrategyProfile {
    pub fn zeros(spec: &GameSpec) -> Self {
        let layout = Layout::of(spec);
        Self {
            stages: vec![vec![AffineStrategy::zeros(&layout); spec.n_players]; spec.horizon],
        }
    }

    pub fn get(&self, player: usize, stage: usize) -> &AffineStrategy {
        &self.stages[stage][player]
    }

    pub fn get_mut(&mut self, player: usize, stage: usize) -> &mut AffineStrategy {
        &mut self.stages[stage][player]
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    /// Sup-norm of the coefficient difference.
    pub fn sup_diff(&self, other: &Self) -> f64 {
        self.stages
            .iter()
            .zip(&other.stages)
            .flat_map(|(a, b)| a.iter().zip(b))
            .fold(0.0f64, |acc, (a, b)| acc.max(a.sup_diff(b)))
    }

    /// `(1 - w) * self + w * target`.
    pub fn blend(&self, target: &Self, w: f64) -> Self {
        let mix = |a: &DMatrix<f64>, b: &DMatrix<f64>| a * (1.0 - w) + b * w;
        Self {
            stages: self
                .stages
                .iter()
                .zip(&target.stages)
                .map(|(sa, sb)| {
                    sa.iter()
                        .zip(sb)
                        .map(|(a, b)| AffineStrategy {
                            l_mat: mix(&a.l_mat, &b.l_mat),
                            m_f: mix(&a.m_f, &b.m_f),
                            m_const: a
                                .m_const
                                .iter()
                                .zip(&b.m_const)
                                .map(|(x, y)| x * (1.0 - w) + y * w)
                                .collect(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Checks shapes against the game and that all entries are finite.
    pub fn check(&self, spec: &GameSpec) -> Result<()> {
        let layout = Layout::of(spec);
        if self.stages.len() != spec.horizon {
            return Err(Error::dims("profile.stages", spec.horizon, self.stages.len()));
        }
        for (t, stage) in self.stages.iter().enumerate() {
            if stage.len() != spec.n_players {
                return Err(Error::dims(format!("profile.stages[{t}]"), spec.n_players, stage.len()));
            }
            for (i, s) in stage.iter().enumerate() {
                let at = format!("profile.stages[{t}][{i}]");
                if s.l_mat.shape() != (layout.na, layout.nv) {
                    return Err(Error::dims(format!("{at}.l_mat"), format!("{}x{}", layout.na, layout.nv), format!("{:?}", s.l_mat.shape())));
                }
                if s.m_f.shape() != (layout.na, layout.n_f()) {
                    return Err(Error::dims(format!("{at}.m_f"), format!("{}x{}", layout.na, layout.n_f()), format!("{:?}", s.m_f.shape())));
                }
                if s.m_const.len() != layout.na {
                    return Err(Error::dims(format!("{at}.m_const"), layout.na, s.m_const.len()));
                }
                if !s.is_finite() {
                    return Err(Error::InvalidArgument {
                        arg: "profile",
                        reason: format!("{at} has non-finite coefficients"),
                    });
                }
            }
        }
        Ok(())
    }

    /// `L` matrices of all players at one stage.
    pub fn gains_at(&self, stage: usize) -> Vec<DMatrix<f64>> {
        self.stages[stage].iter().map(|s| s.l_mat.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_and_diff() {
        let spec = crate::instances::canonical(2, 7);
        let zero = StrategyProfile::zeros(&spec);
        let mut one = zero.clone();
        one.get_mut(1, 0).l_mat[(0, 0)] = 2.0;
        one.get_mut(0, 1).m_const[0] = -4.0;
        assert_eq!(zero.sup_diff(&one), 4.0);
        let half = zero.blend(&one, 0.5);
        assert_eq!(half.get(1, 0).l_mat[(0, 0)], 1.0);
        assert_eq!(half.get(0, 1).m_const[0], -2.0);
        assert!(one.check(&spec).is_ok());
        one.get_mut(0, 0).m_const.push(0.0);
        assert!(one.check(&spec).is_err());
    }
}
