//! QdLinear features: charge capacity interpolated onto a fixed voltage grid.
//!
//! A feature always spans the full grid (`T′` points). Partial observation is
//! a contiguous observed prefix recorded in `obs_mask`; the random masking
//! used for self-supervision is a separate flag channel carried by
//! [`MaskedFeature`].

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ecm::CycleRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoltageGrid {
    pub v_lower: f64,
    pub v_upper: f64,
    pub n_points: usize,
}

impl VoltageGrid {
    pub fn new(v_lower: f64, v_upper: f64, n_points: usize) -> Result<Self> {
        let g = Self {
            v_lower,
            v_upper,
            n_points,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_lower < self.v_upper) {
            return Err(Error::Config("voltage grid needs v_lower < v_upper".into()));
        }
        if self.n_points < 8 {
            return Err(Error::Config(format!("voltage grid needs >= 8 points, got {}", self.n_points)));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.v_upper - self.v_lower) / (self.n_points - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            self.v_upper
        } else {
            self.v_lower + i as f64 * self.step()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.point(i)).collect()
    }
}

/// Capacity (Ah) at each grid voltage of one charge cycle.
///
/// Equality compares identifiers, conditions and the observed prefix only;
/// values behind the mask are not part of the observable feature.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QdLinearFeature {
    pub cell_id: usize,
    pub cycle: usize,
    pub values: Vec<f64>,
    pub obs_mask: Vec<bool>,
    /// Constant charge current of the source cycle (A).
    pub current_a: f64,
    pub temp_c: f64,
}

impl PartialEq for QdLinearFeature {
    fn eq(&self, other: &Self) -> bool {
        self.cell_id == other.cell_id
            && self.cycle == other.cycle
            && self.current_a == other.current_a
            && self.temp_c == other.temp_c
            && self.obs_mask == other.obs_mask
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.obs_mask)
                .all(|((a, b), &obs)| !obs || a == b)
    }
}

impl QdLinearFeature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of observed points `T`.
    pub fn n_observed(&self) -> usize {
        self.obs_mask.iter().take_while(|&&o| o).count()
    }

    pub fn observed(&self) -> &[f64] {
        &self.values[..self.n_observed()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.obs_mask.len() {
            return Err(Error::Feature("values and obs_mask lengths differ".into()));
        }
        let t = self.n_observed();
        if self.obs_mask[t..].iter().any(|&o| o) {
            return Err(Error::Feature("observed region must be a contiguous prefix".into()));
        }
        let obs = &self.values[..t];
        if obs.iter().any(|v| !v.is_finite()) || obs.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Feature(format!(
                "cell {} cycle {}: observed capacities must be finite and non-decreasing",
                self.cell_id, self.cycle
            )));
        }
        Ok(())
    }
}

/// State-of-health label, `100 · C_full / C_nom`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SohLabel {
    pub soh_pct: f64,
    pub c_full: f64,
    pub c_nom: f64,
}

impl SohLabel {
    pub const MAX_PCT: f64 = 110.0;

    pub fn from_capacities(c_full: f64, c_nom: f64) -> Result<Self> {
        if !(c_nom > 0.0) {
            return Err(Error::Config(format!("nominal capacity must be positive, got {c_nom}")));
        }
        let soh_pct = 100.0 * c_full / c_nom;
        if !(soh_pct > 0.0 && soh_pct <= Self::MAX_PCT) {
            return Err(Error::Domain(format!("SOH {soh_pct:.3}% outside (0, 110]")));
        }
        Ok(Self { soh_pct, c_full, c_nom })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
        }
        Ok(Self { ratio, seed })
    }
}

/// A feature with randomly hidden observed positions.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFeature {
    pub feature: QdLinearFeature,
    pub masked: Vec<bool>,
}

impl MaskedFeature {
    pub fn unmasked(feature: QdLinearFeature) -> Self {
        let masked = vec![false; feature.len()];
        Self { feature, masked }
    }

    /// Whether position `i` is visible to the model.
    pub fn visible(&self, i: usize) -> bool {
        self.feature.obs_mask[i] && !self.masked[i]
    }
}

/// `⌈fraction · n⌉` robust to representation error in `fraction`.
pub(crate) fn ceil_fraction(fraction: f64, n: usize) -> usize {
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Interpolates a charge cycle onto `grid`.
///
/// Voltages are made monotone by a running maximum; among samples sharing a
/// voltage the first one wins. Grid points below the first sample take its
/// capacity; points above the last sample are unobserved.
pub fn qdlinear(cycle: &CycleRecord, grid: &VoltageGrid) -> Result<QdLinearFeature> {
    grid.validate()?;
    let mut vs: Vec<f64> = Vec::with_capacity(cycle.len());
    let mut qs: Vec<f64> = Vec::with_capacity(cycle.len());
    let mut running = f64::NEG_INFINITY;
    for (&v, &q) in cycle.voltage_v.iter().zip(&cycle.q_ah) {
        if v > running {
            running = v;
            vs.push(v);
            qs.push(q);
        }
    }
    let inside = vs.iter().filter(|&&v| v >= grid.v_lower && v <= grid.v_upper).count();
    if inside < 2 {
        return Err(Error::Feature(format!(
            "cell {} cycle {}: {inside} samples inside the {:.3}-{:.3} V grid (need 2)",
            cycle.cell_id, cycle.cycle, grid.v_lower, grid.v_upper
        )));
    }
    let v_max = *vs.last().unwrap();
    let mut values = Vec::with_capacity(grid.n_points);
    let mut obs_mask = Vec::with_capacity(grid.n_points);
    for g in grid.points() {
        if g > v_max {
            values.push(f64::NAN);
            obs_mask.push(false);
        } else if g <= vs[0] {
            values.push(qs[0]);
            obs_mask.push(true);
        } else {
            let k = vs.partition_point(|&v| v < g);
            let (v0, v1, q0, q1) = (vs[k - 1], vs[k], qs[k - 1], qs[k]);
            values.push(q0 + (q1 - q0) * (g - v0) / (v1 - v0));
            obs_mask.push(true);
        }
    }
    Ok(QdLinearFeature {
        cell_id: cycle.cell_id,
        cycle: cycle.cycle,
        values,
        obs_mask,
        current_a: median(&cycle.current_a),
        temp_c: median(&cycle.temp_c),
    })
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Keeps only the first `⌈observed_fraction · T′⌉` points observed. Hidden
/// values stay in place.
pub fn truncate_partial(feature: &QdLinearFeature, observed_fraction: f64) -> Result<QdLinearFeature> {
    if !(observed_fraction > 0.0 && observed_fraction <= 1.0) {
        return Err(Error::Config(format!("observed fraction {observed_fraction} outside (0, 1]")));
    }
    let keep = ceil_fraction(observed_fraction, feature.len()).min(feature.n_observed());
    let mut out = feature.clone();
    for (i, o) in out.obs_mask.iter_mut().enumerate() {
        *o = *o && i < keep;
    }
    Ok(out)
}

/// Hides `⌈ratio · T⌉` observed positions chosen uniformly at random.
/// Returns the masked feature and the sorted hidden indices.
pub fn apply_random_mask(feature: &QdLinearFeature, spec: &MaskSpec) -> (MaskedFeature, Vec<usize>) {
    let t = feature.n_observed();
    let k = ceil_fraction(spec.ratio, t);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut idx = index::sample(&mut rng, t, k).into_vec();
    idx.sort_unstable();
    let mut masked = vec![false; feature.len()];
    for &i in &idx {
        masked[i] = true;
    }
    (
        MaskedFeature {
            feature: feature.clone(),
            masked,
        },
        idx,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// V(Q) linear from 3.0 V at 0 Ah to 4.2 V at 1 Ah.
    fn linear_cycle(v_stop: f64) -> CycleRecord {
        let n = 1201;
        let mut c = CycleRecord::default();
        for i in 0..n {
            let q = i as f64 / (n - 1) as f64;
            let v = 3.0 + 1.2 * q;
            if v > v_stop + 1e-12 {
                break;
            }
            c.t_s.push(i as f64);
            c.voltage_v.push(v);
            c.q_ah.push(q);
            c.current_a.push(1.0);
            c.temp_c.push(25.0);
        }
        c
    }

    #[test]
    fn linear_curve_interpolates_exactly() {
        let grid = VoltageGrid::new(3.0, 4.2, 13).unwrap();
        let f = qdlinear(&linear_cycle(4.2), &grid).unwrap();
        assert_eq!(f.n_observed(), 13);
        for (i, v) in f.values.iter().enumerate() {
            assert!((v - i as f64 / 12.0).abs() < 1e-9, "{i}: {v}");
        }
        assert_eq!(f.current_a, 1.0);
    }

    #[test]
    fn truncated_cycle_is_an_observed_prefix() {
        let grid = VoltageGrid::new(3.0, 4.2, 13).unwrap();
        let f = qdlinear(&linear_cycle(3.6), &grid).unwrap();
        assert_eq!(f.n_observed(), 7);
        assert!((f.values[6] - 0.5).abs() < 1e-9);
        assert!(f.obs_mask[7..].iter().all(|o| !o));
        f.validate().unwrap();
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let grid = VoltageGrid::new(3.0, 4.2, 13).unwrap();
        let mut c = linear_cycle(4.2);
        c.voltage_v.iter_mut().for_each(|v| *v += 5.0);
        assert!(matches!(qdlinear(&c, &grid), Err(Error::Feature(_))));
    }

    #[test]
    fn noisy_voltage_is_made_monotone() {
        let grid = VoltageGrid::new(3.0, 4.2, 13).unwrap();
        let mut c = linear_cycle(4.2);
        for (i, v) in c.voltage_v.iter_mut().enumerate() {
            if i % 7 == 3 {
                *v -= 0.01;
            }
        }
        let f = qdlinear(&c, &grid).unwrap();
        f.validate().unwrap();
    }

    #[test]
    fn truncate_examples() {
        let grid = VoltageGrid::new(3.0, 4.2, 128).unwrap();
        let f = qdlinear(&linear_cycle(4.2), &grid).unwrap();
        assert_eq!(truncate_partial(&f, 1.0).unwrap(), f);
        let half = truncate_partial(&f, 0.5).unwrap();
        assert_eq!(half.n_observed(), 64);
        assert_eq!(half.values[100], f.values[100]);
        assert!(truncate_partial(&f, 0.0).is_err());
    }

    #[test]
    fn mask_examples() {
        let grid = VoltageGrid::new(3.0, 4.2, 128).unwrap();
        let f = truncate_partial(&qdlinear(&linear_cycle(4.2), &grid).unwrap(), 100.0 / 128.0).unwrap();
        assert_eq!(f.n_observed(), 100);
        let (m, idx) = apply_random_mask(&f, &MaskSpec::new(0.0, 1).unwrap());
        assert!(idx.is_empty() && m.masked.iter().all(|x| !x));
        let (m, idx) = apply_random_mask(&f, &MaskSpec::new(0.3, 1).unwrap());
        assert_eq!(idx.len(), 30);
        assert!(idx.iter().all(|&i| i < 100));
        assert_eq!(m.masked.iter().filter(|&&x| x).count(), 30);
        let (_, again) = apply_random_mask(&f, &MaskSpec::new(0.3, 1).unwrap());
        assert_eq!(idx, again);
        assert!(MaskSpec::new(1.0, 0).is_err());
    }

    #[test]
    fn soh_label_definition() {
        let l = SohLabel::from_capacities(0.99, 1.1).unwrap();
        assert!((l.soh_pct - 90.0).abs() < 1e-9);
        assert!(SohLabel::from_capacities(1.3, 1.1).is_err());
        assert!(SohLabel::from_capacities(0.0, 1.1).is_err());
    }
}
