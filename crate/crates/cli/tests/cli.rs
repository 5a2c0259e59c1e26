use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn reluid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reluid")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

#[test]
fn check_three_inputs_is_identifiable() {
    let out = reluid(&["check", "--model", s(&data("chain_model.json")), "--sample", s(&data("chain_sample_3.json"))]);
    assert_eq!(out.status.code(), Some(0));
    let r = json(&out);
    assert_eq!(r["r_gamma"], 3);
    assert_eq!(r["dim"], 3);
    assert_eq!(r["verdict"], "LocallyIdentifiable");
    assert_eq!(r["reproducibility"]["path_order"], "canonical-v1");
    assert_eq!(r["reproducibility"]["tie_break"], "smallest-successor-index");
    assert_eq!(r["diagnostics"]["rank_policy"]["tol"], 1e-8);
}

#[test]
fn check_one_input_is_not_identifiable() {
    let out = reluid(&["check", "--model", s(&data("chain_model.json")), "--sample", s(&data("chain_sample_1.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let r = json(&out);
    assert_eq!((r["r_gamma"].as_u64(), r["r_a"].as_u64()), (Some(1), Some(1)));
}

#[test]
fn indeterminate_exits_two() {
    // [2,3,2], seed 1, n = 7 has R_Gamma = 10 < R_A = 12 < dim = 14.
    let dir = tempfile::tempdir().unwrap();
    let sweep = reluid(&["sweep", "--layer-sizes", "2,3,2", "--num-seeds", "1", "--seed", "1", "--n-max", "7"]);
    let r = json(&sweep);
    let last = &r["rows"][6];
    assert_eq!(last["verdict"], "Indeterminate");
    // Rebuild the same instance through files and run check on it.
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let arch = reluid::Architecture::new(vec![2, 3, 2]).unwrap();
    let p = reluid::NetworkParams::random_normal(arch, &mut rng);
    let mut values = Vec::new();
    for _ in 0..14 {
        values.push(rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal));
    }
    let x = nalgebra::DMatrix::from_row_slice(7, 2, &values);
    let model = dir.path().join("m.json");
    let sample = dir.path().join("x.json");
    std::fs::write(&model, reluid::io::model_to_string(&p)).unwrap();
    std::fs::write(&sample, reluid::io::sample_to_string(&x)).unwrap();
    let out = reluid(&["check", "--model", s(&model), "--sample", s(&sample)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn near_boundary_input_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let sample = dir.path().join("x.json");
    std::fs::write(&sample, r#"{"format_version": 1, "inputs": [[2.0], [1e-9], [5.0]]}"#).unwrap();
    let out = reluid(&["check", "--model", s(&data("chain_model.json")), "--sample", s(&sample)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out)["diagnostics"]["near_boundary"], true);
}

#[test]
fn missing_and_malformed_files() {
    let out = reluid(&["check", "--model", "/nonexistent/model.json", "--sample", s(&data("chain_sample_1.json"))]);
    assert_eq!(out.status.code(), Some(66));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"format_version\": 1,\n  \"layer_sizes\": [1, 1, 1],\n  \"weights\": [[[1.0]], [[1.0, 2.0]]],\n  \"biases\": [[0.0], [0.0]]\n}\n").unwrap();
    let out = reluid(&["check", "--model", s(&bad), "--sample", s(&data("chain_sample_1.json"))]);
    assert_eq!(out.status.code(), Some(65));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights[1][0]"));

    std::fs::write(&bad, "{\n  \"format_version\": 1,\n  \"inputs\": [[1.0],\n").unwrap();
    let out = reluid(&["check", "--model", s(&data("chain_model.json")), "--sample", s(&bad)]);
    assert_eq!(out.status.code(), Some(65));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));

    // Sample width disagrees with the model.
    std::fs::write(&bad, r#"{"format_version": 1, "inputs": [[1.0, 2.0]]}"#).unwrap();
    let out = reluid(&["check", "--model", s(&data("chain_model.json")), "--sample", s(&bad)]);
    assert_eq!(out.status.code(), Some(65));
}

#[test]
fn usage_errors() {
    assert_eq!(reluid(&["check", "--rank-tol", "-1", "--model", "m", "--sample", "x"]).status.code(), Some(64));
    assert_eq!(reluid(&["check", "--sample", s(&data("chain_sample_1.json"))]).status.code(), Some(64));
    assert_eq!(reluid(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(reluid(&["sweep", "--num-seeds", "2"]).status.code(), Some(64));
    assert_eq!(reluid(&["--help"]).status.code(), Some(0));
}

#[test]
fn lift_verify_surfaces_residuals() {
    let out = reluid(&["lift-verify", "--model", s(&data("chain_model.json")), "--sample", s(&data("chain_sample_3.json")), "--exact"]);
    assert_eq!(out.status.code(), Some(0));
    let r = json(&out);
    assert_eq!(r["check"]["max_abs_residual"], 0.0);
    assert_eq!(r["num_paths"], 3);
    assert_eq!(r["exact"]["linear_representation_exact"], true);
}

#[test]
fn jacobian_dumps_parse_back() {
    for (kind, rows, cols) in [("gamma", 3, 3), ("alpha", 3, 3), ("lift", 3, 1), ("dpsi", 3, 3), ("fd", 3, 3)] {
        let out =
            reluid(&["jacobian", "--model", s(&data("chain_model.json")), "--sample", s(&data("chain_sample_3.json")), "--matrix", kind]);
        assert_eq!(out.status.code(), Some(0), "{kind}");
        let (_, m) = reluid::io::parse_triplets(&String::from_utf8(out.stdout).unwrap()).unwrap();
        assert_eq!((m.nrows, m.ncols), (rows, cols), "{kind}");
    }
}

#[test]
fn rank_reports_full_spectra() {
    let out = reluid(&["rank", "--model", s(&data("chain_model.json")), "--sample", s(&data("chain_sample_3.json"))]);
    let r = json(&out);
    assert_eq!(r["gamma"]["singular_values"].as_array().unwrap().len(), 3);
    assert_eq!(r["dpsi"]["rank"], 3);
}

#[test]
fn perturb_writes_witness() {
    let dir = tempfile::tempdir().unwrap();
    let witness = dir.path().join("twin.json");
    let out = reluid(&[
        "perturb",
        "--model",
        s(&data("chain_model.json")),
        "--sample",
        s(&data("chain_sample_1.json")),
        "--witness-out",
        s(&witness),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let r = json(&out);
    assert_eq!(r["flatness"]["flat_to_rounding"], true);
    assert_eq!(r["continuation"]["found"], true);
    assert_eq!(r["continuation"]["equivalence"], "NotEquivalent");

    // The witness has the same output on X = [2] but a different lift.
    let twin = reluid::io::parse_model(&std::fs::read_to_string(&witness).unwrap()).unwrap();
    let anchor = reluid::io::parse_model(&std::fs::read_to_string(data("chain_model.json")).unwrap()).unwrap();
    let x = [2.0];
    let (a, _) = reluid::forward(&anchor, &x).unwrap();
    let (b, _) = reluid::forward(&twin, &x).unwrap();
    assert!((a[0] - b[0]).abs() <= 1e-10 * (1.0 + a[0].abs()));
    assert_ne!(twin.to_flat(), anchor.to_flat());

    // With the necessary condition satisfied there is no continuation.
    let out = reluid(&["perturb", "--model", s(&data("chain_model.json")), "--sample", s(&data("chain_sample_3.json"))]);
    assert_eq!(out.status.code(), Some(0));
    assert!(json(&out)["continuation"].is_null());
}

#[test]
fn canonicalize_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    std::fs::write(
        &m,
        r#"{"format_version": 1, "layer_sizes": [2, 2, 1],
        "weights": [[[1.0, -2.0], [0.5, 3.0]], [[4.0, -0.25]]], "biases": [[1.0, 2.0], [0.5]]}"#,
    )
    .unwrap();
    let once = dir.path().join("once.json");
    assert_eq!(reluid(&["canonicalize", "--model", s(&m), "--out", s(&once)]).status.code(), Some(0));
    let twice = reluid(&["canonicalize", "--model", s(&once)]);
    assert_eq!(std::fs::read(&once).unwrap(), twice.stdout);
    let p = reluid::io::parse_model(&String::from_utf8(twice.stdout).unwrap()).unwrap();
    assert_eq!(p.weight_matrix(2).as_slice(), &[1.0, -1.0]);
}

#[test]
fn sweep_chain_identifies_at_three() {
    let out =
        reluid(&["sweep", "--model", s(&data("chain_model.json")), "--distribution", "alternating", "--num-seeds", "10", "--n-max", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let r = json(&out);
    assert_eq!(r["below_bound_violations"], 0);
    for seed in r["seeds"].as_array().unwrap() {
        assert_eq!(seed["smallest_n_with_c_s"], 3);
        assert_eq!(seed["ranks_monotone"], true);
    }
}

#[test]
fn reports_are_byte_identical_and_out_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("r.json");
    let args = ["sweep", "--layer-sizes", "2,2,2", "--num-seeds", "8", "--n-max", "10", "--seed", "42"];
    let a = reluid(&args);
    let b = reluid(&args);
    assert_eq!(a.stdout, b.stdout);
    let mut with_out = args.to_vec();
    with_out.extend(["--out", s(&file)]);
    assert_eq!(reluid(&with_out).status.code(), Some(0));
    assert_eq!(std::fs::read(&file).unwrap(), a.stdout);
}
