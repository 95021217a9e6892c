use std::fs;
use std::path::Path;

use sumo::linalg::{gaussian_matrix, matrix_with_singular_values};
use sumo_cli::{run_cli, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const QUADRATIC: &str = r#"
name = "quad"
step_budget = 40
grad_tolerance = 1e-3
seeds = [0, 1, 2]

[model]
kind = "quadratic"

[data]
kind = "ill_conditioned_quadratic"
m = 12
n = 6
spectrum_max = 100.0

[optimizer]
learning_rate = 0.01
rank = 4
subspace_update_every = 10
"#;

fn write_spec(dir: &Path, text: &str) -> String {
    let path = dir.join("spec.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["sumo"];
    full.extend_from_slice(args);
    run_cli(full)
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn run_writes_one_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), QUADRATIC);
    let out = dir.path().join("out");
    let code = run(&["run", &spec, "--output-dir", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let (header, rows) = read_csv(&out.join("results.csv"));
    assert_eq!(header, sumo_cli::output::RESULTS_HEADER);
    assert_eq!(rows.len(), 3);
    let seeds: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(seeds, ["0", "1", "2"]);
    for seed in 0..3 {
        let trace = out.join("traces").join(format!("quad__seed{seed}.csv"));
        let (h, t) = read_csv(&trace);
        assert_eq!(h, sumo_cli::output::TRACE_HEADER);
        assert!(!t.is_empty());
    }
    let (_, timings) = read_csv(&out.join("timings.csv"));
    assert_eq!(timings.len(), 3);
}

#[test]
fn oversized_rank_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), QUADRATIC);
    let out = dir.path().join("out");
    let code = run(&["run", &spec, "--output-dir", out.to_str().unwrap(), "--override", "optimizer.rank=7"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(!out.join("results.csv").exists());
    let err = sumo_cli::resolve_specs(Path::new(&spec), &["optimizer.rank=7".into()], None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("optimizer.rank") && msg.contains("exceeds min(m, n) = 6"), "{msg}");
}

#[test]
fn unknown_field_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), &QUADRATIC.replace("rank = 4", "rnak = 4"));
    let err = sumo_cli::resolve_specs(Path::new(&spec), &[], None).unwrap_err();
    assert!(err.to_string().contains("optimizer"), "{err}");
    assert_eq!(run(&["run", &spec]), EXIT_CONFIG);
    assert_eq!(run(&["run", "/nonexistent/spec.toml"]), EXIT_CONFIG);
}

#[test]
fn override_is_reflected_in_label_column() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), QUADRATIC);
    let out = dir.path().join("out");
    let code = run(&[
        "run",
        &spec,
        "--output-dir",
        out.to_str().unwrap(),
        "--override",
        "optimizer.orthogonalizer=newton_schulz5",
        "--seed",
        "7",
    ]);
    assert_eq!(code, EXIT_OK);
    let (_, rows) = read_csv(&out.join("results.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "7");
    assert_eq!(rows[0][3], "newton_schulz5");
}

#[test]
fn sweep_rows_cover_specs_times_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{QUADRATIC}\n[sweep]\northogonalizers = [\"exact_svd\", \"newton_schulz5\"]\nranks = [2, 4]\n");
    let spec = write_spec(dir.path(), &text);
    let out = dir.path().join("out");
    assert_eq!(run(&["run", &spec, "--output-dir", out.to_str().unwrap(), "--workers", "3"]), EXIT_OK);
    let (_, rows) = read_csv(&out.join("results.csv"));
    assert_eq!(rows.len(), 4 * 3);
    let mut keys: Vec<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    let sorted = {
        let mut k = keys.clone();
        k.sort();
        k
    };
    assert_eq!(keys, sorted);
    keys.dedup();
    assert_eq!(keys.len(), 12);
}

#[test]
fn divergent_run_exits_two_and_keeps_its_row() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), QUADRATIC);
    let out = dir.path().join("out");
    let code = run(&[
        "run",
        &spec,
        "--output-dir",
        out.to_str().unwrap(),
        "--override",
        "method=gradient_descent",
        "--override",
        "optimizer.learning_rate=1.0",
    ]);
    assert_eq!(code, EXIT_FAILURE);
    let (_, rows) = read_csv(&out.join("results.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[7] == "true" && !r[8].is_empty()));
    assert!(rows.iter().all(|r| r[4].is_empty()), "gradient descent has no rank");
}

#[test]
fn checkpoint_flag_writes_restorable_state() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), QUADRATIC);
    let out = dir.path().join("out");
    assert_eq!(run(&["run", &spec, "--output-dir", out.to_str().unwrap(), "--checkpoint", "--seed", "1"]), EXIT_OK);
    let ckpt: sumo::optimizer::Checkpoint = sumo::io::read_json(&out.join("checkpoints").join("quad__seed1.json")).unwrap();
    let layers = ckpt.restore().unwrap();
    assert_eq!(layers.len(), 1);
    assert_eq!(layers[0].weight.shape(), (12, 6));
}

#[test]
fn results_are_bit_identical_across_executions() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), QUADRATIC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["run", &spec, "--output-dir", a.to_str().unwrap(), "--workers", "1"]), EXIT_OK);
    assert_eq!(run(&["run", &spec, "--output-dir", b.to_str().unwrap(), "--workers", "4"]), EXIT_OK);
    assert_eq!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
    for seed in 0..3 {
        let name = format!("quad__seed{seed}.csv");
        assert_eq!(
            fs::read(a.join("traces").join(&name)).unwrap(),
            fs::read(b.join("traces").join(&name)).unwrap()
        );
    }
}

#[test]
fn verify_bounds_reports_kappa_100_row_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = run(&[
        "verify-bounds",
        "--kappas",
        "1,100",
        "--ranks",
        "1,4",
        "--iterations",
        "1,5",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let (header, rows) = read_csv(&out.join("bounds.csv"));
    assert_eq!(header, sumo_cli::output::BOUNDS_HEADER);
    assert_eq!(rows.len(), 8);
    let row = rows.iter().find(|r| r[0] == "100.0" && r[1] == "1" && r[2] == "5").unwrap();
    let bound: f64 = row[4].parse().unwrap();
    assert!((bound - 0.99f64.powi(32)).abs() < 1e-12);
    assert!(format!("{bound:.4}").starts_with("0.7250"));
    for r in rows.iter().filter(|r| r[0] == "1.0") {
        assert!(r[3].parse::<f64>().unwrap() <= 1e-6);
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
    }
    assert!(rows.iter().all(|r| r[5] == "true"));
}

#[test]
fn verify_bounds_rejects_kappa_below_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["verify-bounds", "--kappas", "0.5", "--output-dir", out.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn accounting_columns_match_formulas() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = run(&[
        "accounting",
        "--shapes",
        "1024x512,1024x1024,8x1024",
        "--rank",
        "8",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let (header, rows) = read_csv(&out.join("accounting.csv"));
    assert_eq!(header, sumo_cli::output::ACCOUNTING_HEADER);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][3], "12288");
    for r in &rows {
        let m: u64 = r[0].parse().unwrap();
        let n: u64 = r[1].parse().unwrap();
        assert_eq!(r[4].parse::<u64>().unwrap(), 2 * m * n);
    }
    assert_eq!(rows[1][10], "8720384");
    assert_eq!(rows[1][12], "141952");
}

#[test]
fn extract_adapter_identical_files_give_rank_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = gaussian_matrix(5, 4, &mut rng);
    let p = dir.path().join("w.json");
    sumo::io::write_matrix(&p, &w).unwrap();
    let out = dir.path().join("adapter");
    let ps = p.to_str().unwrap();
    assert_eq!(
        run(&["extract-adapter", "--pretrained", ps, "--finetuned", ps, "--out", out.to_str().unwrap()]),
        EXIT_OK
    );
    let meta: sumo::adapter::AdapterMetadata = sumo::io::read_json(&out.join("adapter.json")).unwrap();
    assert_eq!(meta.rank, 0);
    assert_eq!(meta.residual_norm, 0.0);
}

#[test]
fn extract_adapter_recovers_exact_rank() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pre = gaussian_matrix(8, 6, &mut rng);
    let delta = matrix_with_singular_values(8, 6, &[4.0, 2.0, 1.0], &mut rng);
    let pp = dir.path().join("pre.json");
    let fp = dir.path().join("ft.json");
    sumo::io::write_matrix(&pp, &pre).unwrap();
    sumo::io::write_matrix(&fp, &(&pre + &delta)).unwrap();
    let out = dir.path().join("adapter");
    let code = run(&[
        "extract-adapter",
        "--pretrained",
        pp.to_str().unwrap(),
        "--finetuned",
        fp.to_str().unwrap(),
        "--tolerance",
        "1e-8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let meta: sumo::adapter::AdapterMetadata = sumo::io::read_json(&out.join("adapter.json")).unwrap();
    assert_eq!(meta.rank, 3);
    assert!(meta.residual_norm <= 1e-8);
    let a = sumo::io::read_matrix(&out.join("a.json")).unwrap();
    let b = sumo::io::read_matrix(&out.join("b.json")).unwrap();
    assert!((&a * &b - &delta).norm() <= 1e-8);
}

#[test]
fn extract_adapter_shape_mismatch_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pp = dir.path().join("pre.json");
    let fp = dir.path().join("ft.json");
    sumo::io::write_matrix(&pp, &gaussian_matrix(3, 4, &mut rng)).unwrap();
    sumo::io::write_matrix(&fp, &gaussian_matrix(4, 3, &mut rng)).unwrap();
    let code = run(&[
        "extract-adapter",
        "--pretrained",
        pp.to_str().unwrap(),
        "--finetuned",
        fp.to_str().unwrap(),
        "--out",
        dir.path().join("adapter").to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_CONFIG);
}
