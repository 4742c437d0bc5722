use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use selcal::eval_harness::prepare;
use selcal::robust_trainer::initial_selector;
use selcal::selector::{binarize, HardSelector};
use selcal::cli::RunConfig;
use selcal::textfmt::ModelText;

const SMALL: &str = "\
task = toy
n_fit = 300
n_train = 1000
n_tune = 600
n_test = 800
iforest_trees = 10
max_reference = 100
m = 4
kappa = 2
sample_size = 200
epochs = 1
steps_per_epoch = 2
num_retrains = 2
num_test_resamples = 2
grid = 0.5,0.75,1.0
test_shifts = clean,rotation:0.5
";

fn selcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selcal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.display().to_string()
}

#[test]
fn gen_writes_header_plus_rows_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = selcal(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(a.join("train.csv")).unwrap();
    assert_eq!(text.lines().count(), 1001);
    assert!(text.starts_with("x0,x1,y\n"));
    for f in ["train.csv", "tune.csv", "test.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let o = selcal(&["gen", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "9"]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("train.csv")).unwrap(), fs::read(b.join("train.csv")).unwrap());
}

#[test]
fn unknown_key_fails_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lamda2 = 0.001\n");
    let o = selcal(&["gen", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda2"));
}

#[test]
fn missing_base_model_fails_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "base_model = nowhere/model.txt\n");
    let o = selcal(&["train", "--config", &cfg, "--out", dir.path().join("t").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere/model.txt"));
}

#[test]
fn zero_steps_writes_the_binarized_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "");
    let out = dir.path().join("t");
    let o = selcal(&["train", "--config", &cfg_path, "--out", out.to_str().unwrap(), "--steps", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let cfg = RunConfig::from_file(Path::new(&cfg_path)).unwrap();
    let prep = prepare(&cfg.task_config(), None).unwrap();
    let init = initial_selector(&prep.model, &prep.extractor, &prep.train, cfg.train_config().seed).unwrap();
    let (_, tune_metas) = prep.extractor.extract_dataset(&prep.model, &prep.tune).unwrap();
    let expected = binarize(&init, &init.scores(&tune_metas).unwrap(), cfg.task.train.xi).unwrap();
    assert_eq!(fs::read_to_string(out.join("selector.txt")).unwrap(), expected.to_text().render());
    let report = fs::read_to_string(out.join("train_report.csv")).unwrap();
    assert_eq!(report, "step,mean_error,topk_error,loss\n");
}

#[test]
fn train_then_eval_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let mut outputs = Vec::new();
    for run in ["r1", "r2"] {
        let t = dir.path().join(run).join("train");
        let o = selcal(&["train", "--config", &cfg, "--out", t.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let sel = HardSelector::<f64>::from_text(&ModelText::read(&t.join("selector.txt")).unwrap()).unwrap();
        assert!(sel.tau.is_finite());
        let report = fs::read_to_string(t.join("train_report.csv")).unwrap();
        let last_loss: f64 = report.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
        assert!(last_loss.is_finite());

        // Evaluate the saved selector through a config pointing at it.
        let eval_cfg = dir.path().join(format!("{run}.cfg"));
        fs::write(&eval_cfg, format!("{SMALL}selector = {}\n", t.join("selector.txt").display())).unwrap();
        let e = dir.path().join(run).join("eval");
        let o = selcal(&["eval", "--config", eval_cfg.to_str().unwrap(), "--out", e.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let curves = fs::read_to_string(e.join("curves.csv")).unwrap();
        let aucs = fs::read_to_string(e.join("aucs.csv")).unwrap();
        assert_eq!(curves.lines().next(), Some("method,coverage,s_bce2,s_bce_inf,s_brier,s_risk"));
        assert_eq!(aucs.lines().next(), Some("method,metric,auc"));
        assert!(curves.lines().any(|l| l.starts_with("full,")));
        assert!(aucs.lines().any(|l| l.starts_with("full,")));
        outputs.push((t, e));
    }
    let files = |p: &Path| {
        let mut v: Vec<_> = fs::read_dir(p).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    };
    for (a, b) in [(&outputs[0].0, &outputs[1].0), (&outputs[0].1, &outputs[1].1)] {
        let (fa, fb) = (files(a), files(b));
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{} differs", x.display());
        }
    }
}

#[test]
fn eval_without_selector_retrains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let e = dir.path().join("eval");
    let o = selcal(&["eval", "--config", &cfg, "--out", e.to_str().unwrap(), "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = fs::read_to_string(e.join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("method,perturbation,metric,mean_auc,std_auc,trials\n"));
    assert!(agg.lines().any(|l| l.starts_with("smmce,all,s_bce2,") && l.ends_with(",4")));
}
