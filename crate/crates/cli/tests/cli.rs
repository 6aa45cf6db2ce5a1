mod common;

use common::{code, contents, fixtures, json, nuhyp};
use nuhyp::shadowing::PseudoOrbit;
use nuhyp::systems::TorusMap;
use nuhyp::{DiscreteMap, TorusPoint};
use serde_json::Value;
use tempfile::tempdir;

fn lp() -> f64 {
    (3.0 + 5f64.sqrt()) / 2.0
}

/// Unit vector along the expanding eigendirection of [[2,1],[1,1]].
fn eu() -> [f64; 2] {
    let v = [1.0, lp() - 2.0];
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    [v[0] / n, v[1] / n]
}

fn wrap(d: f64) -> f64 {
    d - d.round()
}

#[test]
fn analyze_cat_has_full_density_at_level_one() {
    let d = tempdir().unwrap();
    let o = nuhyp(d.path(), &["analyze", "--system", "cat", "--eps", "0.05", "--n", "1e5"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&d.path().join("analyze.json"));
    for lv in r["result"]["levels"].as_array().unwrap() {
        assert_eq!(lv["density"].as_f64(), Some(1.0));
    }
    assert_eq!(r["result"]["max_log_a1"].as_f64(), Some(0.0));
    assert_eq!(r["result"]["max_log_a2"].as_f64(), Some(0.0));
    let l = lp().ln();
    assert!((r["result"]["chi_e"].as_f64().unwrap() - l).abs() < 1e-9);
    assert!((r["result"]["chi_f"].as_f64().unwrap() + l).abs() < 1e-9);
}

#[test]
fn usage_errors_exit_with_two() {
    let d = tempdir().unwrap();
    for args in [
        vec!["analyze", "--n", "0"],
        vec!["analyze", "--eps", "abc"],
        vec!["analyze", "--bogus", "1"],
        vec!["close", "--system", "cat"],
        vec!["shadow"],
    ] {
        let o = nuhyp(d.path(), &args, d.path());
        assert_eq!(code(&o), 2, "{args:?}");
    }
}

#[test]
fn epsilon_above_eps0_is_a_precondition_failure() {
    let d = tempdir().unwrap();
    let o = nuhyp(d.path(), &["analyze", "--eps", "0.2", "--n", "1e4"], d.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("eps0"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = tempdir().unwrap();
    let cfg = d.path().join("run.cfg");
    std::fs::write(&cfg, "# cat run\nsystem = cat\nn = 5000\nwindow = 100\neps = 0.02\n").unwrap();
    let out = d.path().join("o");
    let o = nuhyp(d.path(), &["analyze", "--config", cfg.to_str().unwrap(), "--eps", "0.04"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("analyze.json"));
    assert_eq!(r["config"]["n"].as_u64(), Some(5000));
    assert_eq!(r["config"]["window"].as_u64(), Some(100));
    assert_eq!(r["config"]["epsilon"].as_f64(), Some(0.04));
    std::fs::write(&cfg, "n: 10\n").unwrap();
    let o = nuhyp(d.path(), &["analyze", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(code(&o), 2);
}

#[test]
fn every_output_carries_the_config_hash() {
    let d = tempdir().unwrap();
    let o = nuhyp(d.path(), &["analyze", "--n", "3000", "--window", "100"], d.path());
    assert_eq!(code(&o), 0);
    let hash = json(&d.path().join("analyze.json"))["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for (name, bytes) in contents(d.path()) {
        let text = String::from_utf8(bytes).unwrap();
        if name.ends_with(".csv") {
            assert_eq!(text.lines().next().unwrap(), format!("# config_hash={hash}"));
        } else {
            assert!(text.contains(&hash));
        }
    }
    // a different seed changes the hash
    let e = tempdir().unwrap();
    nuhyp(d.path(), &["analyze", "--n", "3000", "--window", "100", "--seed", "2"], e.path());
    let other = json(&e.path().join("analyze.json"))["config_hash"].as_str().unwrap().to_string();
    assert_ne!(hash, other);
}

/// Float-tolerant structural comparison of two JSON documents.
fn same_json(a: &Value, b: &Value, path: &str) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) if x.is_f64() || y.is_f64() => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()) + 1e-300, "{path}: {x} vs {y}");
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{path}");
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                same_json(p, q, &format!("{path}[{i}]"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{path}");
            for (k, v) in x {
                same_json(v, &y[k], &format!("{path}.{k}"));
            }
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}

#[test]
fn single_jump_fixture_matches_golden_and_linear_solution() {
    let d = tempdir().unwrap();
    let args = ["shadow", "--system", "cat", "--eps", "0.05", "--samples", "64", "--input", "cat_single_jump.txt"];
    let o = nuhyp(&fixtures(), &args, d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let got = json(&d.path().join("shadow.json"));
    let golden = json(&fixtures().join("cat_single_jump.golden.json"));
    same_json(&got, &golden, "");

    // linear oracle: only the unstable part of the jump at k = 0 is pulled back
    let po = PseudoOrbit::from_text(&std::fs::read_to_string(fixtures().join("cat_single_jump.txt")).unwrap()).unwrap();
    let f = TorusMap::cat();
    let x0 = po.points[3];
    let img = (0..20).fold(x0, |q, _| f.forward(&q));
    let x1 = po.points[4];
    let jump = [wrap(x1.coords[0] - img.coords[0]), wrap(x1.coords[1] - img.coords[1])];
    let u = eu();
    let ju = jump[0] * u[0] + jump[1] * u[1];
    let shift = ju * lp().powi(-20);
    for solver in ["constructive", "newton"] {
        let r = &got["result"][solver];
        let z = &r["z"]["coords"];
        for c in 0..2 {
            let dz = wrap(z[c].as_f64().unwrap() - x0.coords[c]);
            assert!((dz - shift * u[c]).abs() < 1e-10, "{solver}");
        }
        let errs = &r["errors"];
        for j in [0usize, 5, 10, 20] {
            let want = ju.abs() * lp().powi(j as i32 - 20);
            assert!((errs[3][j].as_f64().unwrap() - want).abs() < 1e-10, "{solver} j={j}");
        }
        let js = (jump[0] * jump[0] + jump[1] * jump[1] - ju * ju).sqrt();
        assert!((errs[4][0].as_f64().unwrap() - js).abs() < 1e-10);
    }
    assert!(got["result"]["agreement"].as_f64().unwrap() < 1e-12);
}

#[test]
fn true_orbit_is_its_own_shadow() {
    let d = tempdir().unwrap();
    let f = TorusMap::cat();
    let mut pts = vec![TorusPoint::new(0.4142, 0.6931)];
    for _ in 0..4 {
        let last = *pts.last().unwrap();
        pts.push((0..15).fold(last, |q, _| f.forward(&q)));
    }
    let po = PseudoOrbit::new(-2, pts, vec![15; 5], 0.0, 1.0, false).unwrap();
    let file = d.path().join("orbit.txt");
    std::fs::write(&file, po.to_text()).unwrap();
    let o = nuhyp(d.path(), &["shadow", "--system", "cat", "--input", "orbit.txt"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&d.path().join("shadow.json"));
    for solver in ["constructive", "newton"] {
        for row in r["result"][solver]["errors"].as_array().unwrap() {
            for e in row.as_array().unwrap() {
                assert!(e.as_f64().unwrap() <= 1e-12, "{solver}");
            }
        }
    }
}

#[test]
fn malformed_pseudo_orbit_reports_the_line() {
    let d = tempdir().unwrap();
    std::fs::write(d.path().join("bad.txt"), "beta 1e-6\nt 1\n0 0.25 0.5 20\n1 0.5 nope 20\n").unwrap();
    let o = nuhyp(d.path(), &["shadow", "--input", "bad.txt"], d.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"));
}

#[test]
fn horseshoe_negative_controls() {
    let d = tempdir().unwrap();
    let small = ["horseshoe", "--system", "cat", "--n", "10", "--measure-steps", "2e5", "--support-size", "1e5", "--candidates", "1e5"];
    let mut trimmed = small.to_vec();
    trimmed.extend(["--alphabet-trim", "1"]);
    let o = nuhyp(d.path(), &trimmed, d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&d.path().join("horseshoe.json"));
    assert_eq!(r["result"]["audit"]["entropy_estimate"].as_f64(), Some(0.0));
    assert_eq!(r["result"]["model"]["alphabet"].as_array().unwrap().len(), 1);
    for name in ["alphabet.csv", "decoded.csv", "support.csv", "growth.csv"] {
        assert!(d.path().join(name).exists(), "{name}");
    }

    let mut empty = small.to_vec();
    empty[8] = "0";
    assert_eq!(empty[7], "--support-size");
    let o = nuhyp(d.path(), &empty, &d.path().join("e"));
    assert_eq!(code(&o), 3);
}

#[test]
fn closing_the_cat_fixed_point() {
    let d = tempdir().unwrap();
    let o = nuhyp(d.path(), &["close", "--system", "cat", "--period", "5", "--x0", "0,0"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c = &json(&d.path().join("close.json"))["result"]["certificate"];
    let l = 5.0 * lp().ln();
    assert!((c["floquet"][0].as_f64().unwrap() - l).abs() < 1e-10);
    assert!((c["floquet"][1].as_f64().unwrap() + l).abs() < 1e-10);
    assert_eq!(c["bounds_pass"].as_bool(), Some(true));
}

#[test]
fn select_power_reports_densities() {
    let d = tempdir().unwrap();
    let o = nuhyp(
        d.path(),
        &["select-power", "--system", "perturbed-cat:delta=0.1", "--n", "3e4", "--theta", "0.5", "--powers", "1,2,4"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&d.path().join("select_power.json"));
    let dens = r["result"]["densities"].as_array().unwrap();
    assert_eq!(dens.len(), 3);
    let n = r["result"]["n"].as_u64().unwrap();
    let chosen = dens.iter().find(|p| p[0].as_u64() == Some(n)).unwrap();
    assert!(chosen[1].as_f64().unwrap() > 0.5);
    // theta out of range is a precondition failure
    let o = nuhyp(d.path(), &["select-power", "--n", "1e4", "--theta", "1.5"], d.path());
    assert_eq!(code(&o), 3);
}
