mod common;

use common::*;
use powfit::diagnostics::{compare_schemes, overhead_estimate, pearson, sweep_a, weight_stats};
use powfit::fit::{grid_scan, objective, GridSpec};
use powfit::inference::{quantize_model, QuantizeOptions, WeightScheme};
use powfit::intpow::IntPowConfig;
use powfit::model::{accuracy, ActivationKind, Layer, Model};
use powfit::quant::{reconstruction_error, Granularity, Norm, QuantScheme};
use powfit::tensor::Tensor;
use rand_distr::{Distribution, Exp};

const COARSE: GridSpec = GridSpec {
    lo: 0.3,
    hi: 1.5,
    step: 0.05,
};

#[test]
fn sweep_at_one_reproduces_uniform() {
    let (model, ds) = blobs_fixture(0);
    let base = QuantizeOptions::new(bits(4), bits(4));
    let curve = sweep_a(&model, &ds, &base, COARSE, "blobs-0").unwrap();
    let p = curve
        .points
        .iter()
        .find(|p| p.a == 1.0)
        .expect("grid contains a = 1");
    let folded = model.fold_batchnorm().unwrap();
    let eps = reconstruction_error(
        &folded,
        QuantScheme::Uniform,
        bits(4),
        Granularity::per_channel(),
        Norm::L2,
    )
    .unwrap();
    let uniform = QuantizeOptions {
        scheme: WeightScheme::Uniform,
        ..base
    };
    let acc = quantize_model(&model, &uniform, Some(&ds))
        .unwrap()
        .model
        .accuracy(&ds)
        .unwrap();
    assert_eq!(p.epsilon, eps);
    assert_eq!(p.accuracy, acc);
    assert!(curve.points.windows(2).all(|w| w[0].a < w[1].a));
    let r = curve.correlation.unwrap();
    assert!((-1.0..=1.0).contains(&r));
}

#[test]
fn sweep_argmin_matches_grid_scan() {
    let (model, ds) = blobs_fixture(2);
    let folded = model.fold_batchnorm().unwrap();
    let base = QuantizeOptions::new(bits(3), bits(4));
    let grid = GridSpec {
        lo: 0.2,
        hi: 1.6,
        step: 0.01,
    };
    let curve = sweep_a(&model, &ds, &base, grid, "blobs-2").unwrap();
    let scan = grid_scan(
        |a| objective(&folded, a, bits(3), Granularity::per_channel(), Norm::L2),
        grid,
    )
    .unwrap();
    let best =
        curve.points.iter().fold(
            &curve.points[0],
            |m, p| if p.epsilon < m.epsilon { p } else { m },
        );
    assert_eq!(best.a, scan.a_min);
    assert_eq!(best.epsilon, scan.f_min);
}

#[test]
fn sweep_argmin_accuracy_versus_uniform() {
    let mut wins = 0;
    for seed in SEEDS {
        let (model, ds) = blobs_fixture(seed);
        let curve = sweep_a(
            &model,
            &ds,
            &QuantizeOptions::new(bits(4), bits(4)),
            GridSpec::default(),
            "blobs",
        )
        .unwrap();
        let best =
            curve.points.iter().fold(
                &curve.points[0],
                |m, p| if p.epsilon < m.epsilon { p } else { m },
            );
        let one = curve
            .points
            .iter()
            .find(|p| (p.a - 1.0).abs() < 1e-12)
            .unwrap();
        println!(
            "seed {seed}: argmin a = {:.3} accuracy {:.4}; a = 1 accuracy {:.4}; r = {:?}",
            best.a, best.accuracy, one.accuracy, curve.correlation
        );
        wins += usize::from(best.accuracy >= one.accuracy);
    }
    assert!(wins >= 4, "argmin accuracy ≥ uniform on {wins} of 5 seeds");
}

#[test]
fn comparison_table_shape_and_dominance() {
    let (model, ds) = blobs_fixture(1);
    let list = [bits(3), bits(4), bits(6), bits(8), bits(16)];
    let rows =
        compare_schemes(&model, &ds, &list, &QuantizeOptions::new(bits(4), bits(4))).unwrap();
    assert_eq!(rows.len(), 3 * list.len());
    let float = accuracy(&model, &ds).unwrap();
    for chunk in rows.chunks(3) {
        let by = |name: &str| chunk.iter().find(|r| r.scheme == name).unwrap();
        let (u, l, p) = (by("uniform"), by("log"), by("power"));
        assert!(
            p.reconstruction_error <= u.reconstruction_error,
            "b={}",
            u.bits_w
        );
        assert!(p.a_star.is_some() && u.a_star.is_none() && l.a_star.is_none());
        println!(
            "b={:2}: uniform {:.4}/{:.4} log {:.4}/{:.4} power {:.4}/{:.4}",
            u.bits_w,
            u.accuracy,
            u.reconstruction_error,
            l.accuracy,
            l.reconstruction_error,
            p.accuracy,
            p.reconstruction_error
        );
        if u.bits_w == 16 {
            for r in chunk {
                assert_eq!(r.accuracy, float, "{} at 16 bits", r.scheme);
            }
        }
    }
    let again =
        compare_schemes(&model, &ds, &list, &QuantizeOptions::new(bits(4), bits(4))).unwrap();
    assert_eq!(rows, again);
}

fn single(w: Vec<f64>, rows: usize, cols: usize) -> Model {
    Model::new(
        vec![cols],
        vec![Layer::dense(
            Tensor::matrix(rows, cols, w).unwrap(),
            Tensor::vector(vec![0.0; rows]).unwrap(),
            ActivationKind::Identity,
        )],
    )
    .unwrap()
}

#[test]
fn weight_moments() {
    let sym = single(vec![-2.0, -1.0, 0.5, 0.0, -0.5, 1.0, 2.0, 0.0], 2, 4);
    let s = weight_stats(&sym).unwrap();
    assert!(s.layers[0].skewness.unwrap().abs() < 1e-12);

    let mut r = rng(21);
    let g = gaussian(&[100, 100], 1.0, &mut r);
    let s = weight_stats(&single(g.data().to_vec(), 100, 100)).unwrap();
    assert!(s.layers[0].skewness.unwrap().abs() < 0.1);
    assert!((s.layers[0].kurtosis.unwrap() - 3.0).abs() < 0.2);

    let e = Exp::new(1.0).unwrap();
    let skewed: Vec<f64> = (0..10_000).map(|_| e.sample(&mut r)).collect();
    let s = weight_stats(&single(skewed, 100, 100)).unwrap();
    assert!(s.layers[0].skewness.unwrap() > 0.4);
    assert_eq!(s.mean_skewness, s.layers[0].skewness);
}

#[test]
fn overhead_examples() {
    let wide = single(vec![0.01; 512 * 512], 512, 512);
    let o = overhead_estimate(&wide, bits(8), bits(8), IntPowConfig::default()).unwrap();
    println!(
        "512x512 at 8 bits: overhead fraction {:.4}",
        o.overhead_fraction
    );
    assert_eq!(o.mac_cost, 512.0 * 512.0 * 64.0);
    assert_eq!(o.power_eval_cost, 512.0 * 32.0 * 64.0);
    assert!((o.overhead_fraction - 1.0 / 17.0).abs() < 1e-12);

    let wider = single(vec![0.01; 1024 * 1024], 1024, 1024);
    let o2 = overhead_estimate(&wider, bits(8), bits(8), IntPowConfig::default()).unwrap();
    assert_eq!(o2.mac_cost, 4.0 * o.mac_cost);
    assert_eq!(o2.power_eval_cost, 2.0 * o.power_eval_cost);
    assert!(o2.overhead_fraction < o.overhead_fraction);

    for seed in SEEDS {
        let o = overhead_estimate(
            &random_conv_model(seed),
            bits(4),
            bits(6),
            IntPowConfig::default(),
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&o.overhead_fraction));
    }
}

#[test]
fn pearson_is_bounded() {
    let mut r = rng(5);
    let x = gaussian(&[50], 1.0, &mut r);
    let y = gaussian(&[50], 1.0, &mut r);
    let c = pearson(x.data(), y.data()).unwrap();
    assert!((-1.0..=1.0).contains(&c));
}
