use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use manifold_potential::grid::{ScalarGrid, VectorGrid};
use mpot::commands::{self, resolve_config};
use mpot::formats;

const BIN: &str = env!("CARGO_BIN_EXE_mpot");

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("mpot-it-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn mpot(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write_small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.cfg");
    fs::write(
        &path,
        format!("pyramid.base_size = 44\npyramid.levels = 3\npyramid.target_size = none\n{extra}"),
    )
    .unwrap();
    path
}

/// A reduced-size gaussian solve shared by the tests that need a real field.
fn gaussian_run() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch("gaussian");
        let cfg_path = write_small_config(&dir, "source = builtin:gaussian\nncg.max_line_searches = 3000\n");
        let out = mpot(&["solve", "--config", cfg_path.to_str().unwrap(), "--out", dir.join("run").to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir.join("run")
    })
}

fn dir_is_empty(dir: &Path) -> bool {
    !dir.exists() || fs::read_dir(dir).unwrap().next().is_none()
}

#[test]
fn uniform_solve_has_zero_field_and_converges_immediately() {
    let dir = scratch("uniform");
    let cfg = write_small_config(&dir, "");
    let out_dir = dir.join("out");
    let out = mpot(&["solve", "--config", cfg.to_str().unwrap(), "--builtin", "uniform", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let field = formats::read_field(&out_dir.join("field.field")).unwrap();
    assert!(field.max_abs_component() < 1e-8);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged_immediately"], true);
    assert_eq!(report["levels"].as_array().unwrap().len(), 3);
    assert!(report["reconstruction"]["error"].as_f64().unwrap() < 1e-12);
    for name in ["g.grid", "field.field", "field_full.field", "p.grid", "phat.grid", "report.json"] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
}

#[test]
fn report_carries_level_diagnostics() {
    let dir = gaussian_run();
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let levels = report["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 3);
    for l in levels {
        assert!(l["final_energy"].as_f64().unwrap() < l["initial_energy"].as_f64().unwrap());
        assert!(l["line_searches"].as_u64().unwrap() > 0);
        assert!(l["seconds"].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(report["converged_immediately"], false);
    assert!(report["boundary_normal_max"].is_number());
    assert!(report["jacobian_positive_fraction"].as_f64().unwrap() > 0.5);
    let v = &report["valid_region"];
    assert_eq!((v["height"].as_u64(), v["width"].as_u64()), (Some(176), Some(176)));
    let field = formats::read_field(&dir.join("field.field")).unwrap();
    assert_eq!(field.shape(), (176, 176));
    let full = formats::read_field(&dir.join("field_full.field")).unwrap();
    let (top, left) = (v["top"].as_u64().unwrap() as usize, v["left"].as_u64().unwrap() as usize);
    assert_eq!(full.crop(top, left, 176, 176).unwrap(), field);
}

#[test]
fn solve_is_deterministic() {
    let dir = scratch("determinism");
    let cfg = dir.join("two-level.cfg");
    fs::write(&cfg, "source = builtin:bimodal\npyramid.levels = 2\npyramid.target_size = none\n").unwrap();
    for run in ["a", "b"] {
        let out = mpot(&["solve", "--config", cfg.to_str().unwrap(), "--out", dir.join(run).to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["g.grid", "field.field", "field_full.field", "p.grid", "phat.grid"] {
        assert_eq!(fs::read(dir.join("a").join(name)).unwrap(), fs::read(dir.join("b").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn zero_field_reconstructs_uniform() {
    let dir = scratch("zero-rec");
    let f = dir.join("zero.field");
    fs::write(&f, formats::format_field(&VectorGrid::zeros(30, 40).unwrap())).unwrap();
    let out = mpot(&["reconstruct", f.to_str().unwrap(), "--out", dir.join("out").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let phat = formats::read_grid(&dir.join("out/phat.grid")).unwrap();
    assert_eq!(phat.shape(), (30, 40));
    let u = 1.0 / 1200.0;
    assert!(phat.data().iter().all(|&v| (v - u).abs() < 1e-12 * u.max(1.0)));
}

#[test]
fn solved_gaussian_reconstructs_unimodal_at_the_mode() {
    let run = gaussian_run();
    let dir = scratch("gauss-rec");
    let out = mpot(&["reconstruct", run.join("field_full.field").to_str().unwrap(), "--valid", &valid_arg(run), "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let phat = formats::read_grid(&dir.join("phat.grid")).unwrap();
    assert_eq!(phat.shape(), (176, 176));
    assert!((phat.sum() - 1.0).abs() < 1e-12);
    // Oracle: the builtin is centred at (0.5, 0.5), node (87.5, 87.5).
    let (i, _) = phat
        .data()
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let (r, c) = ((i / 176) as f64, (i % 176) as f64);
    assert!((r - 87.5).abs() <= 2.0 && (c - 87.5).abs() <= 2.0, "argmax at ({r}, {c})");
    // Unimodal: one local maximum among samples above a tenth of the peak.
    let peak = phat.max();
    let mut maxima = 0;
    for r in 1..175 {
        for c in 1..175 {
            let v = phat.get(r, c);
            if v > 0.1 * peak && (-1i64..=1).all(|a| (-1i64..=1).all(|b| (a, b) == (0, 0) || v > phat.get((r as i64 + a) as usize, (c as i64 + b) as usize))) {
                maxima += 1;
            }
        }
    }
    assert_eq!(maxima, 1);
    // Matches the copy written by solve.
    assert_eq!(fs::read(dir.join("phat.grid")).unwrap(), fs::read(run.join("phat.grid")).unwrap());
}

fn valid_arg(run: &Path) -> String {
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let v = &report["valid_region"];
    format!("{},{},{},{}", v["top"], v["left"], v["height"], v["width"])
}

#[test]
fn corrupted_header_exits_2_without_outputs() {
    let dir = scratch("corrupt");
    let f = dir.join("bad.field");
    let good = formats::format_field(&VectorGrid::zeros(4, 4).unwrap());
    fs::write(&f, good.replacen("MPFIELD 1 4 4", "MPFIELD 1 4 x", 1)).unwrap();
    let out_dir = dir.join("out");
    for args in [
        vec!["reconstruct", f.to_str().unwrap(), "--out", out_dir.to_str().unwrap()],
        vec!["sample", f.to_str().unwrap(), "--n", "10", "--out", out_dir.to_str().unwrap()],
        vec!["plot", "--field", f.to_str().unwrap(), "--out", out_dir.to_str().unwrap()],
    ] {
        let out = mpot(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(dir_is_empty(&out_dir), "{args:?}");
    }
}

#[test]
fn folding_field_exits_3_with_diagnostics() {
    let dir = scratch("fold");
    // Mirror in x: every cell folds.
    let f = VectorGrid::from_components(
        ScalarGrid::from_fn(16, 16, |_, c| -2.0 * (c as f64 - 7.5)).unwrap(),
        ScalarGrid::zeros(16, 16).unwrap(),
    )
    .unwrap();
    let path = dir.join("fold.field");
    fs::write(&path, formats::format_field(&f)).unwrap();
    let out_dir = dir.join("out");
    let out = mpot(&["reconstruct", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    // Orientation-reversing nodes have no Newton preimage, so the failure
    // surfaces either as folded cells or as non-converged nodes.
    assert!(
        (err.contains("folded cells") && err.contains("row")) || (err.contains("non-invertible") && err.contains("flat indices")),
        "{err}"
    );
    assert!(dir_is_empty(&out_dir));
}

#[test]
fn eval_identity_symmetry_and_shape_mismatch() {
    let dir = scratch("eval");
    let a = ScalarGrid::from_fn(20, 20, |r, c| 1.0 + (r * c) as f64).unwrap();
    let b = ScalarGrid::from_fn(20, 20, |r, c| 1.0 + (r + 2 * c) as f64).unwrap();
    let (pa, pb, pc) = (dir.join("a.grid"), dir.join("b.grid"), dir.join("c.grid"));
    fs::write(&pa, formats::format_grid(&a)).unwrap();
    fs::write(&pb, formats::format_grid(&b)).unwrap();
    fs::write(&pc, formats::format_grid(&ScalarGrid::filled(10, 20, 1.0).unwrap())).unwrap();
    let same = mpot(&["eval", pa.to_str().unwrap(), pa.to_str().unwrap()]);
    assert!(same.status.success());
    let text = String::from_utf8(same.stdout).unwrap();
    assert!(text.contains("bhattacharyya 1.000000") && text.contains("error 0.000000"), "{text}");
    let ab = mpot(&["eval", pa.to_str().unwrap(), pb.to_str().unwrap()]).stdout;
    let ba = mpot(&["eval", pb.to_str().unwrap(), pa.to_str().unwrap()]).stdout;
    assert_eq!(ab, ba);
    assert_eq!(mpot(&["eval", pa.to_str().unwrap(), pc.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(mpot(&["eval", pa.to_str().unwrap(), dir.join("missing.grid").to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn plot_writes_all_artifacts() {
    let run = gaussian_run();
    let dir = scratch("plot");
    let out = mpot(&[
        "plot",
        "--grid",
        run.join("p.grid").to_str().unwrap(),
        "--compare",
        run.join("phat.grid").to_str().unwrap(),
        "--field",
        run.join("field.field").to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let contours = fs::read_to_string(dir.join("contours.csv")).unwrap();
    let levels: std::collections::BTreeSet<&str> = contours.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(levels.len(), 5);
    let compare = fs::read_to_string(dir.join("contours_compare.csv")).unwrap();
    assert!(compare.lines().count() > 1);
    assert!(fs::read_to_string(dir.join("field_arrows.csv")).unwrap().starts_with("x,y,u,v,magnitude\n"));
    assert!(fs::read(dir.join("preview.pgm")).unwrap().starts_with(b"P5\n176 176\n255\n"));

    let flat = scratch("plot-flat");
    let g = flat.join("flat.grid");
    fs::write(&g, formats::format_grid(&ScalarGrid::filled(8, 8, 2.0).unwrap())).unwrap();
    assert!(mpot(&["plot", "--grid", g.to_str().unwrap(), "--out", flat.to_str().unwrap()]).status.success());
    assert_eq!(fs::read_to_string(flat.join("contours.csv")).unwrap(), "level,poly_id,x,y\n");
}

fn read_points(path: &Path) -> Vec<[f64; 2]> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y"));
    lines
        .map(|l| {
            let (x, y) = l.split_once(',').unwrap();
            [x.parse().unwrap(), y.parse().unwrap()]
        })
        .collect()
}

/// Largest gap between the empirical CDF and the uniform CDF on `[0, 1]`.
fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn sample_header_only_for_zero_points() {
    let dir = scratch("sample0");
    let f = dir.join("zero.field");
    fs::write(&f, formats::format_field(&VectorGrid::zeros(10, 10).unwrap())).unwrap();
    let out = mpot(&["sample", f.to_str().unwrap(), "--n", "0", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(dir.join("points.csv")).unwrap(), "x,y\n");
}

#[test]
fn zero_field_samples_are_uniform() {
    let dir = scratch("sample-uniform");
    let f = dir.join("zero.field");
    fs::write(&f, formats::format_field(&VectorGrid::zeros(50, 50).unwrap())).unwrap();
    let out = mpot(&["sample", f.to_str().unwrap(), "--n", "10000", "--seed", "3", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let pts = read_points(&dir.join("points.csv"));
    assert_eq!(pts.len(), 10000);
    for axis in 0..2 {
        let ks = ks_uniform(pts.iter().map(|p| p[axis]).collect());
        assert!(ks < 0.02, "axis {axis}: KS {ks}");
    }
}

/// Variance of a normal with standard deviation `s` truncated to `mu +- a`
/// when the truncation is symmetric: `s^2 (1 - 2 z phi(z) / (2 Phi(z) - 1))`
/// with `z = a / s`. `Phi` comes from a Simpson integral of `phi`.
fn truncated_variance(s: f64, a: f64) -> f64 {
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let z = a / s;
    let n = 2000;
    let h = z / n as f64;
    let mut integral = phi(0.0) + phi(z);
    for k in 1..n {
        integral += if k % 2 == 1 { 4.0 } else { 2.0 } * phi(k as f64 * h);
    }
    let central = 2.0 * integral * h / 3.0;
    s * s * (1.0 - 2.0 * z * phi(z) / central)
}

#[test]
fn gaussian_samples_match_the_truncated_covariance() {
    let run = gaussian_run();
    let dir = scratch("sample-gauss");
    let out = mpot(&[
        "sample",
        run.join("field_full.field").to_str().unwrap(),
        "--valid",
        &valid_arg(run),
        "--n",
        "100000",
        "--seed",
        "11",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pts = read_points(&dir.join("points.csv"));
    let n = pts.len() as f64;
    let mean = [0, 1].map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n);
    let cov = |a: usize, b: usize| pts.iter().map(|p| (p[a] - mean[a]) * (p[b] - mean[b])).sum::<f64>() / (n - 1.0);
    let expect = [truncated_variance(0.12, 0.5), truncated_variance(0.18, 0.5)];
    for k in 0..2 {
        let rel = (cov(k, k) - expect[k]).abs() / expect[k];
        assert!(rel < 0.05, "axis {k}: variance {} vs {} ({rel})", cov(k, k), expect[k]);
    }
    assert!(cov(0, 1).abs() < 0.05 * (expect[0] * expect[1]).sqrt(), "covariance {}", cov(0, 1));
}

#[test]
fn sampling_is_deterministic() {
    let run = gaussian_run();
    let dir = scratch("sample-det");
    for sub in ["a", "b"] {
        let out = mpot(&["sample", run.join("field.field").to_str().unwrap(), "--n", "500", "--seed", "5", "--out", dir.join(sub).to_str().unwrap()]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(dir.join("a/points.csv")).unwrap(), fs::read(dir.join("b/points.csv")).unwrap());
}

#[test]
fn config_and_io_errors_map_to_exit_codes() {
    let dir = scratch("codes");
    let bad = dir.join("bad.cfg");
    fs::write(&bad, "pyramid.levels = many\n").unwrap();
    let out_dir = dir.join("out");
    let o = mpot(&["solve", "--config", bad.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(dir_is_empty(&out_dir));
    let o = mpot(&["solve", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "missing source");
    let o = mpot(&["solve", "--builtin", "square", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = mpot(&["solve", "--config", dir.join("nope.cfg").to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let missing_grid = write_small_config(&dir, "source = grid:absent.grid\n");
    let o = mpot(&["solve", "--config", missing_grid.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    // Output path blocked by a regular file.
    let blocker = dir.join("blocker");
    fs::write(&blocker, "").unwrap();
    let f = dir.join("zero.field");
    fs::write(&f, formats::format_field(&VectorGrid::zeros(6, 6).unwrap())).unwrap();
    let o = mpot(&["reconstruct", f.to_str().unwrap(), "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn flags_override_the_config() {
    let dir = scratch("flags");
    let cfg = write_small_config(&dir, "source = builtin:ring\ndistribution.radius = 0.3\nseed = 4\n");
    let r = resolve_config(Some(&cfg), Some("gaussian"), Some(150), Some(9)).unwrap();
    assert_eq!(r.source, Some(mpot::config::Source::Builtin("gaussian".into())));
    assert!(r.distribution.is_empty());
    assert_eq!((r.pyramid.target_size, r.seed), (Some(150), 9));
    let kept = resolve_config(Some(&cfg), Some("ring"), None, None).unwrap();
    assert_eq!(kept.distribution.len(), 1);
    assert_eq!(kept.seed, 4);
    assert!(resolve_config(Some(&cfg), None, Some(500), None).is_err());
}

#[test]
fn grid_source_solves_like_a_file() {
    let dir = scratch("gridsource");
    let density = ScalarGrid::filled(60, 60, 2.0).unwrap();
    fs::write(dir.join("flat.grid"), formats::format_grid(&density)).unwrap();
    let cfg_path = dir.join("grid.cfg");
    fs::write(&cfg_path, "source = grid:flat.grid\npyramid.levels = 1\npyramid.target_size = none\n").unwrap();
    let cfg = resolve_config(Some(&cfg_path), None, None, None).unwrap();
    let outcome = commands::cmd_solve(&cfg, &dir.join("out")).unwrap();
    assert!(outcome.solution.forward.max_abs_component() < 1e-8);
    assert!(outcome.error.unwrap() < 1e-12);
}
