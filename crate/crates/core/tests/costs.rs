mod common;

use common::*;
use proptest::prelude::*;
use slimnet::flops::{mflops, network_cost, width_matching_cost};
use slimnet::planner::{width_grid, WIDTH_STEP};
use slimnet::{ParamStore, SlimmableModelSpec, SubnetConfig, WidthMultiplier};

#[test]
fn desk_backbone_grid_matches_shape_walk() {
    let spec = SlimmableModelSpec::desk_mobilenet(10);
    let params = ParamStore::zeros(&spec);
    let widths = width_grid(spec.width_lower_bound, WIDTH_STEP).unwrap();
    let mut checked = 0;
    for &r in spec.resolutions.values() {
        for &w in &widths {
            let config = SubnetConfig { width: w, resolution: r };
            assert_eq!(network_cost(&spec, config).unwrap().total, shape_walk_macs(&spec, &params, config), "{config}");
            checked += 1;
        }
    }
    assert!(checked >= 64);
}

#[test]
fn mobilenet_endpoints_by_shape_walk() {
    let spec = SlimmableModelSpec::mobilenet_v1(1000);
    let params = ParamStore::zeros(&spec);
    for (w, r) in [(1.0, 224), (0.25, 128)] {
        let config = SubnetConfig::new(w, r).unwrap();
        assert_eq!(network_cost(&spec, config).unwrap().total, shape_walk_macs(&spec, &params, config));
    }
    assert_eq!(network_cost(&spec, SubnetConfig::new(1.0, 224).unwrap()).unwrap().total, 568_740_352);
}

#[test]
fn per_layer_costs_sum_to_total() {
    let spec = SlimmableModelSpec::desk_mobilenet(10);
    let report = network_cost(&spec, SubnetConfig::new(0.5, 24).unwrap()).unwrap();
    assert_eq!(report.per_layer.iter().map(|c| c.macs).sum::<u64>(), report.total);
    assert_eq!(report.per_layer.len(), spec.layers.len());
}

#[test]
fn unsupported_resolution_is_rejected() {
    let spec = SlimmableModelSpec::desk_mobilenet(10);
    assert!(mflops(&spec, SubnetConfig::new(1.0, 30).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_backbones_match_shape_walk(seed in 0u64..10_000, w in 0.0f64..=1.0, hi in any::<bool>()) {
        let spec = random_spec(seed);
        let params = ParamStore::zeros(&spec);
        let lo = spec.width_lower_bound.value();
        let width = WidthMultiplier::new(lo + (1.0 - lo) * w).unwrap();
        let resolution = if hi { spec.resolutions.max() } else { spec.resolutions.min() };
        let config = SubnetConfig { width, resolution };
        prop_assert_eq!(network_cost(&spec, config).unwrap().total, shape_walk_macs(&spec, &params, config));
    }

    #[test]
    fn cost_is_monotone_in_width_and_resolution(a in 0.25f64..=1.0, b in 0.25f64..=1.0) {
        let spec = SlimmableModelSpec::desk_mobilenet(10);
        let (lo, hi) = (a.min(b), a.max(b));
        for &r in spec.resolutions.values() {
            prop_assert!(mflops(&spec, SubnetConfig::new(lo, r).unwrap()).unwrap() <= mflops(&spec, SubnetConfig::new(hi, r).unwrap()).unwrap());
        }
        let rs = spec.resolutions.values();
        for pair in rs.windows(2) {
            prop_assert!(mflops(&spec, SubnetConfig::new(a, pair[1]).unwrap()).unwrap() <= mflops(&spec, SubnetConfig::new(a, pair[0]).unwrap()).unwrap());
        }
    }
}

#[test]
fn width_matching_finds_closest_cost() {
    let spec = SlimmableModelSpec::desk_mobilenet(10);
    let target = network_cost(&spec, SubnetConfig::new(0.25, 20).unwrap()).unwrap().total;
    let w = width_matching_cost(&spec, 32, target, 0.01).unwrap();
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).filter(|&x| x >= 0.01).collect();
    let best = grid
        .iter()
        .map(|&x| {
            let c = network_cost(&spec, SubnetConfig::new(x, 32).unwrap()).unwrap().total;
            ((c as i64 - target as i64).abs(), x)
        })
        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .unwrap();
    let got = network_cost(&spec, SubnetConfig { width: w, resolution: 32 }).unwrap().total;
    assert_eq!((got as i64 - target as i64).abs(), best.0);
}
