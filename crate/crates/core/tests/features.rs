use batteryttt::ecm::*;
use batteryttt::features::*;
use batteryttt::io::*;
use proptest::prelude::*;

fn params(curvature: f64) -> EcmParams {
    EcmParams::new(0.05, 0.03, 2000.0, OcvTable::parametric(2.6, 4.25, curvature).unwrap(), 1.1).unwrap()
}

fn cc(rate: f64, dt: f64) -> ChargeProtocol {
    ChargeProtocol {
        mode: ChargeMode::Cc,
        current_rate: rate,
        v_upper: 4.2,
        v_lower: 2.7,
        cv_cutoff_current: 0.0,
        dt,
        temperature: 25.0,
        max_steps: 1_000_000,
    }
}

fn simulate(curvature: f64, rate: f64, dt: f64, sigma: f64, seed: u64) -> CycleRecord {
    let p = params(curvature);
    simulate_charge_cycle(&p, &CellState::fresh(&p, 0.0), &cc(rate, dt), MeasurementNoise { sigma, seed }).unwrap()
}

fn grid() -> VoltageGrid {
    VoltageGrid::new(2.7, 4.2, 128).unwrap()
}

/// Linear interpolation of `ys` over increasing `xs` at `x`.
fn lerp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&v| v < x).clamp(1, xs.len() - 1);
    let (x0, x1) = (xs[k - 1], xs[k]);
    ys[k - 1] + (ys[k] - ys[k - 1]) * (x - x0) / (x1 - x0)
}

/// The cycle up to its first sample above `v_cut`.
fn cut_at(c: &CycleRecord, v_cut: f64) -> CycleRecord {
    let n = c.voltage_v.iter().position(|&v| v > v_cut).unwrap_or(c.len());
    CycleRecord {
        cell_id: c.cell_id,
        cycle: c.cycle,
        t_s: c.t_s[..n].to_vec(),
        voltage_v: c.voltage_v[..n].to_vec(),
        current_a: c.current_a[..n].to_vec(),
        temp_c: c.temp_c[..n].to_vec(),
        q_ah: c.q_ah[..n].to_vec(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noiseless_features_are_non_decreasing(curv in 0.0f64..1.0, rate in 0.2f64..1.0, dt in 1.0f64..20.0) {
        let f = qdlinear(&simulate(curv, rate, dt, 0.0, 0), &grid()).unwrap();
        prop_assert!(f.validate().is_ok());
        prop_assert!(f.observed().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn noisy_features_stay_monotone(sigma in 1e-4f64..5e-3, seed in any::<u64>()) {
        let f = qdlinear(&simulate(0.5, 0.5, 10.0, sigma, seed), &grid()).unwrap();
        prop_assert!(f.validate().is_ok());
    }

    #[test]
    fn truncation_is_a_prefix_of_extraction(fraction in 0.05f64..1.0, curv in 0.0f64..1.0) {
        let full = qdlinear(&simulate(curv, 0.5, 10.0, 0.0, 0), &grid()).unwrap();
        let part = truncate_partial(&full, fraction).unwrap();
        let t = part.n_observed();
        prop_assert_eq!(t, ((fraction * 128.0) - 1e-9).ceil().max(1.0).min(full.n_observed() as f64) as usize);
        prop_assert_eq!(part.observed(), &full.values[..t]);
        prop_assert!(part.obs_mask[t..].iter().all(|&o| !o));
    }

    #[test]
    fn extraction_commutes_with_cutting_the_cycle(v_cut in 3.0f64..4.1, curv in 0.0f64..1.0) {
        let cycle = simulate(curv, 0.5, 10.0, 0.0, 0);
        let full = qdlinear(&cycle, &grid()).unwrap();
        let cut = cut_at(&cycle, v_cut);
        let part = qdlinear(&cut, &grid()).unwrap();
        let v_last = *cut.voltage_v.last().unwrap();
        let expected = grid().points().iter().filter(|&&g| g <= v_last).count();
        prop_assert_eq!(part.n_observed(), expected);
        prop_assert_eq!(part.observed(), &full.values[..expected]);
    }

    #[test]
    fn doubling_capacities_doubles_values(curv in 0.0f64..1.0, c_full in 0.5f64..1.1) {
        let cycle = simulate(curv, 0.5, 10.0, 0.0, 0);
        let doubled = CycleRecord { q_ah: cycle.q_ah.iter().map(|q| 2.0 * q).collect(), ..cycle.clone() };
        let a = qdlinear(&cycle, &grid()).unwrap();
        let b = qdlinear(&doubled, &grid()).unwrap();
        prop_assert_eq!(a.n_observed(), b.n_observed());
        for (x, y) in a.observed().iter().zip(b.observed()) {
            prop_assert_eq!(2.0 * x, *y);
        }
        let l1 = SohLabel::from_capacities(c_full, 1.1).unwrap();
        let l2 = SohLabel::from_capacities(2.0 * c_full, 2.2).unwrap();
        prop_assert!((l1.soh_pct - l2.soh_pct).abs() < 1e-12);
    }

    #[test]
    fn only_observed_positions_are_masked(ratio in 0.0f64..0.95, fraction in 0.1f64..1.0, seed in any::<u64>()) {
        let full = qdlinear(&simulate(0.5, 0.5, 10.0, 0.0, 0), &grid()).unwrap();
        let part = truncate_partial(&full, fraction).unwrap();
        let t = part.n_observed();
        let (m, idx) = apply_random_mask(&part, &MaskSpec::new(ratio, seed).unwrap());
        prop_assert_eq!(idx.len(), ((ratio * t as f64) - 1e-9).ceil().max(0.0) as usize);
        prop_assert!(idx.iter().all(|&i| i < t));
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(m.masked.iter().filter(|&&b| b).count(), idx.len());
        prop_assert_eq!(&m.feature, &part);
    }
}

#[test]
fn features_reinterpolate_to_the_sampled_voltages() {
    let g = grid();
    let cycle = simulate(0.5, 0.5, 10.0, 0.0, 0);
    let f = qdlinear(&cycle, &g).unwrap();
    let t = f.n_observed();
    let volts: Vec<f64> = g.points()[..t].to_vec();
    let caps = &f.values[..t];
    let mut checked = 0;
    for (&v, &q) in cycle.voltage_v.iter().zip(&cycle.q_ah) {
        if v < volts[1] || v > volts[t - 1] {
            continue;
        }
        let back = lerp(caps, &volts, q);
        assert!((back - v).abs() <= 2.0 * g.step(), "sample at {v} V reinterpolates to {back} V");
        checked += 1;
    }
    assert!(checked > 100, "only {checked} samples inside the grid");
}

#[test]
fn truncation_examples() {
    let full = qdlinear(&simulate(0.5, 0.5, 10.0, 0.0, 0), &grid()).unwrap();
    assert_eq!(full.n_observed(), 128);
    assert_eq!(truncate_partial(&full, 1.0).unwrap(), full);
    assert_eq!(truncate_partial(&full, 0.5).unwrap().n_observed(), 64);
    assert!(truncate_partial(&full, 0.0).is_err());
    assert!(truncate_partial(&full, 1.5).is_err());
}

#[test]
fn mask_examples() {
    let mut f = qdlinear(&simulate(0.5, 0.5, 10.0, 0.0, 0), &VoltageGrid::new(2.7, 4.2, 100).unwrap()).unwrap();
    f.obs_mask.iter_mut().for_each(|o| *o = true);
    assert_eq!(f.n_observed(), 100);
    let (_, none) = apply_random_mask(&f, &MaskSpec::new(0.0, 1).unwrap());
    assert!(none.is_empty());
    let (_, a) = apply_random_mask(&f, &MaskSpec::new(0.3, 9).unwrap());
    let (_, b) = apply_random_mask(&f, &MaskSpec::new(0.3, 9).unwrap());
    assert_eq!(a.len(), 30);
    assert!(a.iter().all(|&i| i < 100));
    assert_eq!(a, b);
    assert!(MaskSpec::new(1.0, 0).is_err());
}

#[test]
fn too_few_samples_inside_the_grid_is_an_error() {
    let cycle = cut_at(&simulate(0.5, 0.5, 10.0, 0.0, 0), 2.705);
    assert!(matches!(qdlinear(&cycle, &grid()), Err(batteryttt::Error::Feature(_))));
}

#[test]
fn feature_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.csv");
    let g = grid();
    let cycles: Vec<CycleRecord> = (0..3)
        .map(|k| CycleRecord { cycle: k, ..simulate(0.5, 0.5, 10.0, 1e-3, k as u64) })
        .collect();
    let features: Vec<QdLinearFeature> =
        cycles.iter().map(|c| truncate_partial(&qdlinear(c, &g).unwrap(), 0.6).unwrap()).collect();
    let labels: Vec<LabelRecord> = (0..3).map(|k| LabelRecord { cell_id: 0, cycle: k, soh_pct: 100.0 - k as f64 }).collect();
    let ds = FeatureDataset {
        sidecar: FeatureSidecar { v_lower: g.v_lower, v_upper: g.v_upper, n_points: g.n_points, c_nom: 1.1, physics: None },
        features,
        labels,
    };
    write_features(&path, &ds).unwrap();
    assert_eq!(read_features(&path).unwrap(), ds);

    let cpath = dir.path().join("cycles.csv");
    write_cycles_csv(&cpath, &cycles).unwrap();
    assert_eq!(read_cycles_csv(&cpath).unwrap(), cycles);
}

#[test]
fn empty_and_malformed_cycle_files() {
    assert!(read_cycles("empty.csv", "".as_bytes()).unwrap().is_empty());
    let header = CYCLE_COLUMNS.join(",");
    assert!(read_cycles("h.csv", format!("{header}\n").as_bytes()).unwrap().is_empty());

    let bad_number = format!("{header}\n0,0,0,0,3.1,1,25,0\n0,0,1,10,abc,1,25,0.01\n");
    let err = read_cycles("n.csv", bad_number.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("n.csv:3") && err.contains("voltage_v"), "{err}");

    let backwards = format!("{header}\n0,0,0,10,3.1,1,25,0\n0,0,1,5,3.2,1,25,0.01\n");
    let err = read_cycles("t.csv", backwards.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("t.csv:3") && err.contains("time"), "{err}");
}
