use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unimoco::cli::{self, RunConfig};
use unimoco::config::KvConfig;
use unimoco::numerics::{GradCheckCase, Tape, Tensor, Var};

const TINY: &str = "
seed = 3
corpus.n_classes = 12
corpus.count.TI_T = 24
corpus.count.T_TI = 20
corpus.count.TI_TI = 16
model.d_model = 16
model.backbone_layers = 1
model.t2i_layers = 1
train.batch_size = 8
bias.total = 48
bias.seeds = 1,2
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unimoco"))
}

fn config_text(dir: &Path, extra: &str) -> String {
    let steps = if extra.contains("train.steps") { "" } else { "train.steps = 4\n" };
    format!("{TINY}{steps}out_dir = {}\n{extra}", dir.display())
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.conf");
    std::fs::write(&p, config_text(dir, extra)).unwrap();
    p
}

fn run(args: &[&str], config: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path, extra: &str) -> RunConfig {
    let text = config_text(dir, extra);
    RunConfig::from_kv(&KvConfig::parse(&text, "test").unwrap()).unwrap()
}

#[test]
fn gen_data_prints_tallies_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = run(&["gen-data"], &cfg);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("train 60 pairs: TI_T=24 T_TI=20 TI_TI=16"), "{}", stdout(&o));
    let first = std::fs::read(dir.path().join(cli::TRAIN_MANIFEST)).unwrap();
    let first_eval = std::fs::read(dir.path().join(cli::EVAL_MANIFEST)).unwrap();
    assert!(run(&["gen-data"], &cfg).status.success());
    assert_eq!(first, std::fs::read(dir.path().join(cli::TRAIN_MANIFEST)).unwrap());
    assert_eq!(first_eval, std::fs::read(dir.path().join(cli::EVAL_MANIFEST)).unwrap());
}

#[test]
fn missing_key_exits_nonzero_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.conf");
    std::fs::write(&p, "seed = 1\ncorpus.count.TI_T = 4\ncorpus.count.T_TI = 4\n").unwrap();
    let o = run(&["gen-data"], &p);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corpus.count.TI_TI"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data"], &write_config(dir.path(), "model.depth = 3\n"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.depth"));
}

#[test]
fn unwritable_output_fails() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = write_config(dir.path(), "");
    let o = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(blocker.join("sub"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn train_then_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert!(run(&["gen-data"], &cfg).status.success());
    let o = run(&["train", "--deterministic"], &cfg);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = std::fs::read_to_string(dir.path().join(cli::LOSS_TRACE)).unwrap();
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 4);

    let o = run(&["eval"], &cfg);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = std::fs::read(dir.path().join(cli::SCORES)).unwrap();
    let text = String::from_utf8(scores.clone()).unwrap();
    for combo in ["TI_T", "T_TI", "TI_TI"] {
        assert!(text.contains(&format!("\"combo\":\"{combo}\"")), "{combo} missing");
    }
    assert!(run(&["eval"], &cfg).status.success());
    assert_eq!(scores, std::fs::read(dir.path().join(cli::SCORES)).unwrap());

    // Retraining from scratch reproduces the checkpoint byte for byte.
    let ckpt = std::fs::read(dir.path().join(cli::CHECKPOINT)).unwrap();
    assert!(run(&["train"], &cfg).status.success());
    assert_eq!(ckpt, std::fs::read(dir.path().join(cli::CHECKPOINT)).unwrap());
}

#[test]
fn eval_rejects_corrupt_checkpoint_without_writing_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.steps = 1\n");
    assert!(run(&["gen-data"], &cfg).status.success());
    assert!(run(&["train"], &cfg).status.success());
    let path = dir.path().join(cli::CHECKPOINT);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let o = run(&["eval"], &cfg);
    assert!(!o.status.success());
    assert!(!dir.path().join(cli::SCORES).exists());
}

#[test]
fn eval_names_config_and_checkpoint_on_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.steps = 1\n");
    assert!(run(&["gen-data"], &cfg).status.success());
    assert!(run(&["train"], &cfg).status.success());
    let other = dir.path().join("other.conf");
    std::fs::write(&other, config_text(dir.path(), "model.n_heads = 4\n")).unwrap();
    let o = run(&["eval"], &other);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("n_heads: config 4 vs checkpoint 2"), "{err}");
    assert!(err.contains(cli::CHECKPOINT));
}

#[test]
fn divergence_keeps_partial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.lr = 1e200\n");
    assert!(run(&["gen-data"], &cfg).status.success());
    let o = run(&["train"], &cfg);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    assert!(dir.path().join(cli::CHECKPOINT).exists());
    assert!(unimoco::model::load_checkpoint(&dir.path().join(cli::CHECKPOINT)).is_ok());
}

#[test]
fn ablation_switches_compose_and_change_training() {
    let dir = tempfile::tempdir().unwrap();
    let trace = |extra: &str| {
        let cfg = config(dir.path(), extra);
        cli::cmd_gen_data(&cfg, &mut Vec::new()).unwrap();
        cli::cmd_train(&cfg, &mut Vec::new()).unwrap();
        std::fs::read_to_string(dir.path().join(cli::LOSS_TRACE)).unwrap()
    };
    let with_aux = trace("");
    let without = trace("ablation.alpha = 0\n");
    assert_ne!(with_aux, without);
    trace("ablation.disable_completion = true\nablation.alpha = 0\n");
    trace("ablation.disable_aux_encoder = true\nablation.disable_padding = true\n");
    trace("ablation.half_padding = true\nmodel.pad_prompt_len = 1\ncorpus.content_len = 2\n");
    for layers in [1, 2, 4] {
        trace(&format!("ablation.t2i_layers = {layers}\n"));
    }
}

#[test]
fn zero_fill_baseline_substitutes_zero_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "ablation.disable_completion = true\n");
    assert_eq!(cfg.model.missing_image, unimoco::model::MissingImageMode::ZeroFill);
    cli::cmd_gen_data(&cfg, &mut Vec::new()).unwrap();
    cli::cmd_train(&cfg, &mut Vec::new()).unwrap();
    let model = unimoco::model::load_checkpoint(&dir.path().join(cli::CHECKPOINT)).unwrap();
    assert!(model.params().find("t2i.tok_emb").is_none());
    assert_eq!(model.completion_calls(), 0);
}

#[test]
fn adapter_training_freezes_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "train.steps = 2\n");
    cli::cmd_gen_data(&cfg, &mut Vec::new()).unwrap();
    cli::cmd_train(&cfg, &mut Vec::new()).unwrap();
    let base_path = dir.path().join("base.ckpt");
    std::fs::rename(dir.path().join(cli::CHECKPOINT), &base_path).unwrap();
    let tuned = config(
        dir.path(),
        &format!(
            "train.steps = 2\nadapter.enabled = true\nadapter.rank = 2\ntrain.init_checkpoint = {}\n",
            base_path.display()
        ),
    );
    cli::cmd_train(&tuned, &mut Vec::new()).unwrap();
    let base = unimoco::model::load_checkpoint(&base_path).unwrap();
    let after = unimoco::model::load_checkpoint(&dir.path().join(cli::CHECKPOINT)).unwrap();
    for id in base.params().ids() {
        let name = base.params().name(id);
        let moved = after.params().find(name).unwrap();
        assert_eq!(base.params().get(id), after.params().get(moved), "{name} changed");
    }
    assert!(after.params().len() > base.params().len());
}

#[test]
fn bias_report_has_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "train.steps = 2\n");
    let mut log = Vec::new();
    cli::cmd_bias(&cfg, &mut log).unwrap();
    let log = String::from_utf8(log).unwrap();
    assert!(log.contains("variant TI_T: TI_T=24 T_TI=12 TI_TI=12"), "{log}");
    let text = std::fs::read_to_string(dir.path().join(cli::BIAS)).unwrap();
    let cells = text.lines().filter(|l| l.contains("\"kind\":\"cell\"")).count();
    assert_eq!(cells, 2 * 3 * 3);
}

#[test]
fn bias_rejects_totals_that_do_not_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "train.steps = 1\n");
    let cfg = RunConfig { bias_total: 50, ..cfg };
    assert!(cli::cmd_bias(&cfg, &mut Vec::new()).is_err());
    assert!(!dir.path().join(cli::BIAS).exists());
}

fn flipped_square() -> GradCheckCase {
    GradCheckCase {
        name: "flipped_square".into(),
        inputs: vec![Tensor::vector(vec![0.5, -1.5])],
        f: Box::new(|t: &mut Tape, x: &[Var]| {
            let v = t.value(x[0]).clone();
            let sq = Tensor::vector(v.data().iter().map(|a| a * a).collect());
            let y = t.custom(
                &[x[0]],
                sq,
                Box::new(|vals, g| {
                    vec![vals[0].data().iter().zip(g).map(|(a, gi)| -2.0 * a * gi).collect()]
                }),
            );
            Ok(t.sum(y))
        }),
    }
}

#[test]
fn gradcheck_names_injected_failure() {
    let mut log = Vec::new();
    let failed = cli::run_gradcheck(&[(1, flipped_square())], &[], &mut log).unwrap();
    assert_eq!(failed, vec!["flipped_square".to_string()]);
    assert!(String::from_utf8(log).unwrap().contains("FAIL flipped_square"));
}

#[test]
fn gradcheck_command_passes() {
    let o = bin().arg("gradcheck").output().unwrap();
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failures"));
}
