use std::path::Path;
use std::process::{Command, Output};

use simulmask::alibi::modified_alibi;
use simulmask::mask::{causal_mask, simul_mask, AttentionMask};
use simulmask::policy::{DecisionPolicy, PromptLayout};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simulmask"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const FIG3: &str = "\
L=10 policy=wait-1
#.........
##........
###.......
####......
#####.....
##...#....
###..##...
####.###..
#########.
##########
";

#[test]
fn mask_dump_prints_wait_one_grid() {
    let out = stdout(&cli(&["mask-dump"]));
    let (desc, mask) = AttentionMask::from_ascii(&out).unwrap();
    assert_eq!(desc, "wait-1");
    let (_, want) = AttentionMask::from_ascii(FIG3).unwrap();
    assert_eq!(mask, want);
}

#[test]
fn causal_dump_is_lower_triangular() {
    let out = stdout(&cli(&["mask-dump", "--mask", "causal", "--source", "3", "--target", "2"]));
    let (desc, mask) = AttentionMask::from_ascii(&out).unwrap();
    assert_eq!(desc, "causal");
    assert_eq!(mask, causal_mask(7).unwrap());
}

#[test]
fn dumped_mask_rebuilds_from_layout() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("mask.txt");
    let args = ["mask-dump", "--pre", "2", "--source", "9", "--mid", "2", "--target", "6", "--k", "3"];
    let mut with_out = args.to_vec();
    with_out.extend(["--out", file.to_str().unwrap()]);
    stdout(&cli(&with_out));
    let (desc, parsed) = AttentionMask::from_ascii(&std::fs::read_to_string(&file).unwrap()).unwrap();
    let k: usize = desc.strip_prefix("wait-").unwrap().parse().unwrap();
    let layout = PromptLayout::new(2, 9, 2, 6).unwrap();
    let rebuilt = simul_mask(&layout, &DecisionPolicy::wait_k(k, 9).unwrap()).unwrap();
    assert_eq!(parsed, rebuilt);
}

#[test]
fn bias_dump_matches_library() {
    let out = stdout(&cli(&["bias-dump", "--slope", "0.5"]));
    let layout = PromptLayout::new(1, 4, 1, 4).unwrap();
    let mask = simul_mask(&layout, &DecisionPolicy::wait_k(1, 4).unwrap()).unwrap();
    assert_eq!(out, modified_alibi(&mask, 0.5).unwrap().to_csv());
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(cli(&["--config", bad.to_str().unwrap(), "mask-dump"]).status.code(), Some(2));
    assert_eq!(cli(&["--mode", "sideways", "mask-dump"]).status.code(), Some(2));
    let missing = dir.path().join("missing.ckpt");
    let out = dir.path().join("eval");
    let o = cli(&["eval", "--checkpoint", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.txt");
    std::fs::write(
        &path,
        "# small enough for a test\nsentences = 12\neval_sentences = 4\nmin_len = 4\nmax_len = 6\neval_k = 1,3\nmode = cached,recompute\n",
    )
    .unwrap();
    path
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        stdout(&cli(&["--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap(), "run"]));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["summary.csv", "metrics_cached.csv", "metrics_recompute.csv", "loss.csv", "model.ckpt", "traces_k3_cached.jsonl"] {
        let x = std::fs::read(a.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn gen_data_writes_requested_sentences() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    stdout(&cli(&["gen-data", "--task", "shift(2)", "--sentences", "15", "--out", out.to_str().unwrap()]));
    let text = std::fs::read_to_string(out.join("corpus.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 15);
    let corpus = simulmask::data::read_corpus(&out.join("corpus.jsonl"), 64).unwrap();
    assert!(corpus.iter().all(|p| p.target[..] == p.source[2..]));
}
