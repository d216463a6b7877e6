//! Classifier-free guidance in logit space.
//!
//! Zero-weight tokens arrive as `-inf`. Before any offset is formed, `-inf`
//! is clamped to [`GuidanceConfig::floor`]; after combination any value at or
//! below the floor is mapped back to `-inf`. Two-way and three-way guidance
//! share this handling so that three-way guidance with `s_r = 0` (or with
//! `l_r = l_o`) reproduces two-way guidance bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::Logits;

pub const DEFAULT_FLOOR: f64 = -1e4;
pub const DEFAULT_EPS_PARALLEL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GuidanceError {
    #[error("logit vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("guidance scale must be finite and >= 0, got {0}")]
    BadScale(f64),
    #[error("{op} requires {expected:?} mode, config is {actual:?}")]
    WrongMode { op: &'static str, expected: GuidanceMode, actual: GuidanceMode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    TwoWay,
    ThreeWay,
    Replacement,
}

impl std::str::FromStr for GuidanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_way" => Ok(Self::TwoWay),
            "three_way" => Ok(Self::ThreeWay),
            "replacement" => Ok(Self::Replacement),
            other => Err(format!("unknown guidance mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Scale on the original-prompt direction. Ignored in replacement mode.
    pub s_o: f64,
    /// Scale on the reformulated direction. Ignored in two-way mode.
    pub s_r: f64,
    pub eps_parallel: f64,
    pub floor: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::equal_scales(GuidanceMode::ThreeWay, 5.0)
    }
}

impl GuidanceConfig {
    /// `s_o = s_r = s`.
    pub fn equal_scales(mode: GuidanceMode, s: f64) -> Self {
        Self { mode, s_o: s, s_r: s, eps_parallel: DEFAULT_EPS_PARALLEL, floor: DEFAULT_FLOOR }
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        check_scale(self.s_o)?;
        check_scale(self.s_r)
    }
}

fn check_scale(s: f64) -> Result<(), GuidanceError> {
    if s.is_finite() && s >= 0.0 {
        Ok(())
    } else {
        Err(GuidanceError::BadScale(s))
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<(), GuidanceError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(GuidanceError::LengthMismatch(a.len(), b.len()))
    }
}

#[inline]
fn clamp(x: f64, floor: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        floor
    } else {
        x
    }
}

#[inline]
fn restore(x: f64, floor: f64) -> f64 {
    if x <= floor {
        f64::NEG_INFINITY
    } else {
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1 + s) * l_cond - s * l_uncond`, evaluated as `l_cond + s * (l_cond - l_uncond)`.
pub fn cfg_combine(l_cond: &[f64], l_uncond: &[f64], s: f64) -> Result<Logits, GuidanceError> {
    cfg_combine_with_floor(l_cond, l_uncond, s, DEFAULT_FLOOR)
}

pub fn cfg_combine_with_floor(
    l_cond: &[f64],
    l_uncond: &[f64],
    s: f64,
    floor: f64,
) -> Result<Logits, GuidanceError> {
    check_len(l_cond, l_uncond)?;
    check_scale(s)?;
    Ok(l_cond
        .iter()
        .zip(l_uncond)
        .map(|(&c, &u)| {
            let c = clamp(c, floor);
            let d = c - clamp(u, floor);
            restore(c + s * d, floor)
        })
        .collect())
}

/// Remove from `d_r` its component along `d_o`.
///
/// When `|d_o|^2 < eps_parallel` there is no direction to remove and `d_r`
/// is returned unchanged.
pub fn orthogonal_reject(d_r: &[f64], d_o: &[f64], eps_parallel: f64) -> Result<Vec<f64>, GuidanceError> {
    check_len(d_r, d_o)?;
    let norm_sq = dot(d_o, d_o);
    if norm_sq < eps_parallel {
        return Ok(d_r.to_vec());
    }
    let coef = dot(d_r, d_o) / norm_sq;
    Ok(d_r.iter().zip(d_o).map(|(r, o)| r - coef * o).collect())
}

/// `l_o + s_o * d_o + s_r * reject(d_r, d_o)` with `d_o = l_o - l_u` and
/// `d_r = l_r - l_u`, summed in that order.
pub fn three_way_combine(
    l_u: &[f64],
    l_o: &[f64],
    l_r: &[f64],
    cfg: &GuidanceConfig,
) -> Result<Logits, GuidanceError> {
    if cfg.mode != GuidanceMode::ThreeWay {
        return Err(GuidanceError::WrongMode {
            op: "three_way_combine",
            expected: GuidanceMode::ThreeWay,
            actual: cfg.mode,
        });
    }
    check_len(l_u, l_o)?;
    check_len(l_u, l_r)?;
    cfg.validate()?;
    let f = cfg.floor;
    let u: Vec<f64> = l_u.iter().map(|&x| clamp(x, f)).collect();
    let o: Vec<f64> = l_o.iter().map(|&x| clamp(x, f)).collect();
    let d_o: Vec<f64> = o.iter().zip(&u).map(|(o, u)| o - u).collect();
    let d_r: Vec<f64> = l_r.iter().zip(&u).map(|(&r, u)| clamp(r, f) - u).collect();
    let d_r_perp = orthogonal_reject(&d_r, &d_o, cfg.eps_parallel)?;
    Ok(o.iter()
        .zip(&d_o)
        .zip(&d_r_perp)
        .map(|((o, d_o), d_r)| restore(o + cfg.s_o * d_o + cfg.s_r * d_r, f))
        .collect())
}

/// Standard guidance with the reformulated prompt as the condition.
pub fn replacement_combine(l_u: &[f64], l_r: &[f64], s_r: f64) -> Result<Logits, GuidanceError> {
    cfg_combine(l_r, l_u, s_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-4.0..4.0)).collect()
    }

    /// normalize(p_c^(1+s) * p_u^(-s)) computed from probabilities, not logits.
    fn reweighted(l_c: &[f64], l_u: &[f64], s: f64) -> Vec<f64> {
        let p_c = softmax(l_c, 1.0).unwrap();
        let p_u = softmax(l_u, 1.0).unwrap();
        let raw: Vec<f64> = p_c.iter().zip(&p_u).map(|(c, u)| c.powf(1.0 + s) * u.powf(-s)).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / z).collect()
    }

    #[test]
    fn zero_scale_is_identity() {
        let c = [0.5, -1.0, f64::NEG_INFINITY, 3.0];
        let u = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c.to_vec());
    }

    #[test]
    fn hand_evaluated_cfg() {
        assert_eq!(cfg_combine(&[2.0, 0.0], &[1.0, 0.0], 1.0).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn cfg_matches_reweighted_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in [0.0, 1.0, 5.0, 7.5] {
            for _ in 0..200 {
                let c = random_vec(&mut rng, 13);
                let u = random_vec(&mut rng, 13);
                let got = softmax(&cfg_combine(&c, &u, s).unwrap(), 1.0).unwrap();
                let want = reweighted(&c, &u, s);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-9, "s={s}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn sentinels_propagate() {
        let out = cfg_combine(&[f64::NEG_INFINITY, 1.0], &[0.0, 0.0], 5.0).unwrap();
        assert_eq!(out[0], f64::NEG_INFINITY);
        assert_eq!(out[1], 6.0);
        // unconditional zero weight with conditional support stays finite
        let out = cfg_combine(&[0.0], &[f64::NEG_INFINITY], 1.0).unwrap();
        assert!(out[0].is_finite() && out[0] > 0.0);
    }

    #[test]
    fn length_and_scale_errors() {
        assert_eq!(cfg_combine(&[0.0], &[0.0, 1.0], 1.0), Err(GuidanceError::LengthMismatch(1, 2)));
        assert_eq!(cfg_combine(&[0.0], &[0.0], -1.0), Err(GuidanceError::BadScale(-1.0)));
        assert!(orthogonal_reject(&[1.0], &[1.0, 2.0], 1e-12).is_err());
        let cfg = GuidanceConfig::default();
        assert!(three_way_combine(&[0.0], &[0.0], &[0.0, 1.0], &cfg).is_err());
        assert!(replacement_combine(&[0.0, 1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn textbook_projection() {
        assert_eq!(orthogonal_reject(&[1.0, 1.0], &[1.0, 0.0], 1e-12).unwrap(), vec![0.0, 1.0]);
        let d_o = [0.3, -1.2, 2.5];
        let d_r: Vec<f64> = d_o.iter().map(|x| 2.0 * x).collect();
        let out = orthogonal_reject(&d_r, &d_o, 1e-12).unwrap();
        assert!(out.iter().all(|x| x.abs() < 1e-15), "{out:?}");
    }

    #[test]
    fn degenerate_direction_returns_input() {
        let d_r = [1.0, 2.0];
        assert_eq!(orthogonal_reject(&d_r, &[1e-7, 0.0], 1e-12).unwrap(), d_r.to_vec());
    }

    #[test]
    fn rejection_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for dim in [13, 4096] {
            for _ in 0..100 {
                let d_r = random_vec(&mut rng, dim);
                let d_o = random_vec(&mut rng, dim);
                let out = orthogonal_reject(&d_r, &d_o, 1e-12).unwrap();
                let bound = 1e-8 * dot(&d_r, &d_r).sqrt() * dot(&d_o, &d_o).sqrt();
                assert!(dot(&out, &d_o).abs() <= bound);
            }
        }
    }

    #[test]
    fn three_way_hand_example() {
        let cfg = GuidanceConfig::equal_scales(GuidanceMode::ThreeWay, 1.0);
        let out = three_way_combine(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &cfg).unwrap();
        assert_eq!(out, vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn three_way_reductions_are_bitwise_two_way() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let u = random_vec(&mut rng, 13);
            let o = random_vec(&mut rng, 13);
            let r = random_vec(&mut rng, 13);
            let two_way = cfg_combine(&o, &u, 5.0).unwrap();
            let no_r = GuidanceConfig { s_r: 0.0, ..GuidanceConfig::equal_scales(GuidanceMode::ThreeWay, 5.0) };
            let a = three_way_combine(&u, &o, &r, &no_r).unwrap();
            let b = three_way_combine(&u, &o, &o, &GuidanceConfig::default()).unwrap();
            for i in 0..13 {
                assert_eq!(a[i].to_bits(), two_way[i].to_bits());
                assert_eq!(b[i].to_bits(), two_way[i].to_bits());
            }
        }
    }

    #[test]
    fn reformulated_scale_leaves_original_component_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..200 {
            let u = random_vec(&mut rng, 13);
            let o = random_vec(&mut rng, 13);
            let r = random_vec(&mut rng, 13);
            let d_o: Vec<f64> = o.iter().zip(&u).map(|(a, b)| a - b).collect();
            let along = |s_r: f64| {
                let cfg = GuidanceConfig { s_r, ..GuidanceConfig::default() };
                dot(&three_way_combine(&u, &o, &r, &cfg).unwrap(), &d_o)
            };
            let base = along(0.0);
            for s_r in [0.5, 5.0, 50.0] {
                assert!((along(s_r) - base).abs() <= 1e-9 * (1.0 + base.abs()));
            }
        }
    }

    #[test]
    fn three_way_requires_three_way_mode() {
        let cfg = GuidanceConfig::equal_scales(GuidanceMode::TwoWay, 5.0);
        assert!(matches!(
            three_way_combine(&[0.0], &[0.0], &[0.0], &cfg),
            Err(GuidanceError::WrongMode { .. })
        ));
    }

    #[test]
    fn three_way_handles_sentinels() {
        // reformulated prompt forbids token 1, original still wants it
        let u = [4f64.ln(), 0.05f64.ln(), 0.05f64.ln()];
        let o = [4f64.ln(), 3f64.ln(), 0.03f64.ln()];
        let r = [4f64.ln(), f64::NEG_INFINITY, 0.03f64.ln()];
        let out = three_way_combine(&u, &o, &r, &GuidanceConfig::default()).unwrap();
        assert!(out.iter().all(|x| !x.is_nan()));
        assert!(out[0].is_finite());
        // the forbidden token keeps only its component orthogonal to d_o,
        // which is still overwhelmingly negative
        assert!(out[1] < out[0] - 100.0, "{out:?}");
    }

    #[test]
    fn replacement_examples() {
        let u = [0.0, 0.0];
        let r = [1.0, 0.0];
        assert_eq!(replacement_combine(&u, &r, 0.0).unwrap(), r.to_vec());
        assert_eq!(replacement_combine(&u, &r, 6.5).unwrap(), vec![7.5, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let u = random_vec(&mut rng, 13);
            let r = random_vec(&mut rng, 13);
            assert_eq!(replacement_combine(&u, &r, 5.0).unwrap(), cfg_combine(&r, &u, 5.0).unwrap());
        }
    }
}
