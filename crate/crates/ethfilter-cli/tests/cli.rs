use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;

use ethfilter_cli::cache::GRIDS;
use ethfilter_cli::commands::{cmd_assemble, cmd_bounds, cmd_compare, cmd_evolve, Context, EvolveOptions, Source};
use ethfilter_cli::config::RunConfig;
use ethfilter_cli::CliError;
use serde_json::json;

fn context(doc: serde_json::Value, root: &Path) -> Context {
    let mut doc = doc;
    doc["io"]["output_dir"] = json!(root.join("out"));
    Context::new(RunConfig::from_json(&doc.to_string()).unwrap(), Some(root.join("cache"))).unwrap()
}

fn small(n: usize) -> serde_json::Value {
    json!({
        "version": 1,
        "chain": {"n": n, "j2": 0.2, "g": 1.05},
        "filters": {"x": 3, "x_omega": 3, "sigma_omega": 0.5},
        "engine": {"bond": 64, "trotter_dt": 0.05, "t_max": 16.0, "tn_cap": 6.0},
        "grids": {"omega": {"min": -3.0, "max": 3.0, "step": 0.5}},
        "io": {}
    })
}

/// Rows of a result CSV as `(coords..., value, mask, imag)` numbers.
fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    lines.next().expect("column header");
    lines.map(|l| l.split(',').map(|c| c.parse::<f64>().unwrap()).collect()).collect()
}

fn exe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ethfilter"))
}

fn write_config(dir: &Path, doc: &serde_json::Value) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, doc.to_string()).unwrap();
    p
}

#[test]
fn bounds_for_two_sites_and_rerun_is_cached() {
    let d = tempfile::tempdir().unwrap();
    let ctx = context(json!({"version": 1, "chain": {"n": 2, "g": 1.0}}), d.path());
    let first = cmd_bounds(&ctx).unwrap();
    assert!(!first.cached);
    let want = 1.1 * 2.0 * 5f64.sqrt() / PI;
    assert!((first.alpha - want).abs() < 1e-8, "{} vs {want}", first.alpha);
    let again = cmd_bounds(&ctx).unwrap();
    assert!(again.cached);
    assert_eq!(again.alpha, first.alpha);
}

#[test]
fn alpha_override_is_recorded() {
    let d = tempfile::tempdir().unwrap();
    let ctx = context(json!({"version": 1, "chain": {"n": 4, "g": 1.0}, "filters": {"alpha": 4.5}}), d.path());
    let r = cmd_bounds(&ctx).unwrap();
    assert_eq!((r.alpha, r.alpha_source.as_str()), (4.5, "override"));
    let m = ctx.open_cache().unwrap().manifest().unwrap().unwrap();
    assert_eq!(m.bounds.unwrap().alpha, 4.5);
}

#[test]
fn interrupted_evolution_resumes_bit_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let whole = context(small(4), a.path());
    cmd_bounds(&whole).unwrap();
    let full = cmd_evolve(&whole, &EvolveOptions::default()).unwrap();
    assert!(full.complete && full.rows_done > 4);

    let parts = context(small(4), b.path());
    cmd_bounds(&parts).unwrap();
    let mut runs = 0;
    loop {
        runs += 1;
        let r = cmd_evolve(&parts, &EvolveOptions { max_new_rows: Some(3) }).unwrap();
        if r.complete {
            break;
        }
        assert!(r.rows_done < full.rows_done);
    }
    assert!(runs > 2);
    let read = |ctx: &Context| std::fs::read(ctx.open_cache().unwrap().file(GRIDS)).unwrap();
    assert!(read(&whole) == read(&parts));
}

#[test]
fn reassembly_at_new_widths_reuses_the_cache() {
    let d = tempfile::tempdir().unwrap();
    let ctx = context(small(4), d.path());
    cmd_bounds(&ctx).unwrap();
    cmd_evolve(&ctx, &EvolveOptions::default()).unwrap();
    let grids = ctx.open_cache().unwrap().file(GRIDS);
    let stamp = std::fs::metadata(&grids).unwrap().modified().unwrap();
    let mut values = vec![];
    for sw in [0.6, 0.3] {
        let mut doc = small(4);
        doc["filters"]["sigma_omega"] = json!(sw);
        let ctx = context(doc, d.path());
        let r = cmd_assemble(&ctx, Source::Tebd).unwrap();
        assert_eq!(r.sigma_omega, sw);
        values.push(read_csv(&r.output.join("s_prime.csv")));
    }
    assert_eq!(std::fs::metadata(&grids).unwrap().modified().unwrap(), stamp);
    assert_eq!(values[0].len(), values[1].len());
    assert!(values[0].iter().zip(&values[1]).any(|(a, b)| (a[2] - b[2]).abs() > 1e-6));
}

#[test]
fn too_narrow_energy_filter_is_refused_with_attainable_width() {
    let d = tempfile::tempdir().unwrap();
    let ctx = context(small(4), d.path());
    cmd_bounds(&ctx).unwrap();
    cmd_evolve(&ctx, &EvolveOptions::default()).unwrap();
    let mut doc = small(4);
    doc["filters"]["sigma"] = json!(0.1);
    match cmd_assemble(&context(doc, d.path()), Source::Tebd) {
        Err(CliError::Config(msg)) => assert!(msg.contains("attainable"), "{msg}"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn empty_frequency_grid_gives_header_only_csvs() {
    let d = tempfile::tempdir().unwrap();
    let mut doc = small(4);
    doc["grids"]["omega"] = json!({"min": 1.0, "max": 0.0, "step": 0.1});
    let cfg = write_config(d.path(), &doc);
    let out = d.path().join("o");
    let run = |args: &[&str]| {
        exe()
            .arg("--config")
            .arg(&cfg)
            .arg("--cache-root")
            .arg(d.path().join("cache"))
            .arg("--set")
            .arg(format!("io.output_dir={}", serde_json::to_string(&out).unwrap()))
            .args(args)
            .output()
            .unwrap()
    };
    for stage in ["bounds", "evolve", "assemble"] {
        let o = run(&[stage]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(read_csv(&out.join("tebd/s_prime.csv")).is_empty());
    assert!(!read_csv(&out.join("tebd/dos.csv")).is_empty());
}

#[test]
fn ed_cache_assembly_equals_filtered_oracle() {
    let d = tempfile::tempdir().unwrap();
    let mut doc = small(8);
    doc["grids"]["e_over_n"] = json!({"min": -0.5, "max": 0.5, "step": 0.25});
    let cfg = write_config(d.path(), &doc);
    let out = d.path().join("o");
    for args in [&["bounds"][..], &["oracle"], &["assemble", "--source", "ed"]] {
        let o = exe()
            .arg("-c")
            .arg(&cfg)
            .arg("--cache-root")
            .arg(d.path().join("cache"))
            .arg("--set")
            .arg(format!("io.output_dir={}", serde_json::to_string(&out).unwrap()))
            .args(args)
            .output()
            .unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["dos", "s_prime", "v"] {
        let a = read_csv(&out.join(format!("ed/{name}.csv")));
        let b = read_csv(&out.join(format!("oracle-filtered/{name}.csv")));
        assert_eq!(a.len(), b.len());
        let scale = b.iter().map(|r| r[r.len() - 3].abs()).filter(|v| v.is_finite()).fold(0.0, f64::max);
        for (x, y) in a.iter().zip(&b) {
            let (vx, vy) = (x[x.len() - 3], y[y.len() - 3]);
            assert_eq!(x[x.len() - 2], y[y.len() - 2], "{name}: masks differ");
            if vx.is_finite() {
                assert!((vx - vy).abs() <= 1e-10 * scale, "{name}: {vx} vs {vy}");
            }
        }
    }
}

#[test]
fn starved_bond_fails_comparison_with_truncation_flag() {
    let d = tempfile::tempdir().unwrap();
    let mut doc = small(8);
    doc["engine"]["bond"] = json!(8);
    doc["engine"]["t_max"] = json!(6.0);
    doc["engine"]["tn_cap"] = json!(3.0);
    doc["filters"]["sigma"] = json!(1.2);
    doc["filters"]["sigma_omega"] = json!(1.2);
    let cfg = write_config(d.path(), &doc);
    let o = exe()
        .arg("-c")
        .arg(&cfg)
        .arg("--cache-root")
        .arg(d.path().join("cache"))
        .arg("--set")
        .arg(format!("io.output_dir={}", serde_json::to_string(&d.path().join("o")).unwrap()))
        .arg("compare")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["pass"], json!(false));
    let trunc = report["lines"].as_array().unwrap().iter().find(|l| l["name"] == "truncation").unwrap();
    assert_eq!(trunc["pass"], json!(false));
}

#[test]
fn integrable_comparison_reports_particle_hole_line() {
    let d = tempfile::tempdir().unwrap();
    let mut doc = small(4);
    doc["chain"]["j2"] = json!(0.0);
    let ctx = context(doc, d.path());
    let r = cmd_compare(&ctx).unwrap();
    let ph = r.lines.iter().find(|l| l.name == "particle_hole").expect("particle-hole line");
    assert!(ph.pass && ph.value < 1e-6, "{}", ph.value);
}

#[test]
fn bad_configs_exit_with_code_two() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), &json!({"version": 1, "chain": {"n": 4, "g": 1.0}, "filtres": {}}));
    let o = exe().arg("-c").arg(&cfg).arg("--cache-root").arg(d.path()).arg("bounds").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(d.path(), &json!({"version": 9, "chain": {"n": 4, "g": 1.0}}));
    let o = exe().arg("-c").arg(&cfg).arg("--cache-root").arg(d.path()).arg("bounds").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(d.path(), &json!({"version": 1, "chain": {"n": 4, "g": 1.0}}));
    let o = exe().arg("-c").arg(&cfg).arg("--set").arg("chain.n=-3").arg("bounds").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
