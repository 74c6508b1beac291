//! End-to-end CLI pipeline on a miniature config: pretrain, train both
//! adapter families, compose, analyze, evaluate. Also checks cross-process
//! reproducibility: two separate invocations with the same seed produce
//! byte-identical videos.

use std::path::Path;
use std::process::Command;

fn vidadapt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vidadapt"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn vidadapt");
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn write_mini_config(path: &Path) {
    let config = r#"
base_channels = 8
channel_multipliers = [1]
num_blocks = 1
attn_heads = 2
text_dim = 12
latent_channels = 4
frames = 4
latent_h = 4
latent_w = 4
time_dim = 16
text_tokens = 8
cond_dim = 6
schedule_steps = 12
ddim_steps = 3
pretrain_iterations = 10
stage1_iterations = 6
stage2_iterations = 6
motion_iterations = 6
stage1_lr = 1e-3
stage2_lr = 1e-3
motion_lr = 1e-3
analysis_iterations = 4
seed = 5
"#;
    std::fs::write(path, config).unwrap();
}

#[test]
fn full_pipeline_and_cross_process_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("config.toml");
    write_mini_config(&config);

    // Synthetic demo data (PNG frames on disk).
    run_ok(vidadapt()
        .args(["make-synthetic", "--kind", "subject", "--count", "4", "--seed", "3"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(root.join("subject_images")));
    let class_word = std::fs::read_to_string(root.join("subject_images/class_word.txt"))
        .unwrap()
        .trim()
        .to_string();
    run_ok(vidadapt()
        .args(["make-synthetic", "--kind", "motion", "--count", "1", "--seed", "4"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(root.join("motion_clips")));

    // Pretrain a tiny base.
    run_ok(vidadapt()
        .args(["pretrain-base", "--corpus-size", "6"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(root.join("base")));
    assert!(root.join("base/manifest.json").is_file());
    assert!(root.join("base/pretrain_log.jsonl").is_file());

    // Train subject and motion adapters.
    run_ok(vidadapt()
        .arg("train-subject")
        .arg("--base")
        .arg(root.join("base"))
        .arg("--images")
        .arg(root.join("subject_images"))
        .args(["--class-word", &class_word])
        .arg("--out")
        .arg(root.join("subject_ckpt")));
    run_ok(vidadapt()
        .arg("train-motion")
        .arg("--base")
        .arg(root.join("base"))
        .arg("--videos")
        .arg(root.join("motion_clips"))
        .args(["--caption", "a pattern moving"])
        .arg("--out")
        .arg(root.join("motion_ckpt")));

    // Compose twice with the same seed in separate processes.
    for out in ["gen_a", "gen_b"] {
        run_ok(vidadapt()
            .arg("compose")
            .arg("--base")
            .arg(root.join("base"))
            .arg("--subject")
            .arg(root.join("subject_ckpt"))
            .arg("--motion")
            .arg(root.join("motion_ckpt"))
            .args(["--prompt", &format!("a s* {class_word} drifting"), "--seed", "7"])
            .arg("--out")
            .arg(root.join(out)));
    }
    let a = std::fs::read(root.join("gen_a/video.vt")).unwrap();
    let b = std::fs::read(root.join("gen_b/video.vt")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical videos across processes");
    let metadata = std::fs::read_to_string(root.join("gen_a/metadata.txt")).unwrap();
    assert!(metadata.contains("seed: 7"));
    assert!(metadata.contains("adapter_families: identity,motion"));
    assert!(root.join("gen_a/frames/frame_000.png").is_file());

    // Individual customization paths.
    run_ok(vidadapt()
        .arg("generate-subject")
        .arg("--base")
        .arg(root.join("base"))
        .arg("--subject")
        .arg(root.join("subject_ckpt"))
        .args(["--prompt", &format!("a s* {class_word}"), "--seed", "9"])
        .arg("--out")
        .arg(root.join("gen_subject")));
    // Motion-only without guidance must fail in strict mode...
    let out = vidadapt()
        .arg("generate-motion")
        .arg("--base")
        .arg(root.join("base"))
        .arg("--motion")
        .arg(root.join("motion_ckpt"))
        .args(["--prompt", "a pattern moving", "--seed", "9"])
        .arg("--out")
        .arg(root.join("gen_motion_fail"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("appearance guidance"));
    // ... and succeed with an explicit guidance image.
    run_ok(vidadapt()
        .arg("generate-motion")
        .arg("--base")
        .arg(root.join("base"))
        .arg("--motion")
        .arg(root.join("motion_ckpt"))
        .args(["--prompt", "a pattern moving", "--seed", "9"])
        .arg("--guidance-image")
        .arg(root.join("motion_clips/clip_00/frame_000.png"))
        .arg("--out")
        .arg(root.join("gen_motion")));

    // Weight-change analysis: fine-tune the spatial domain, then report.
    run_ok(vidadapt()
        .arg("finetune-domain")
        .arg("--base")
        .arg(root.join("base"))
        .args(["--domain", "spatial"])
        .arg("--images")
        .arg(root.join("subject_images"))
        .args(["--caption", &format!("a photo of a {class_word}")])
        .arg("--out")
        .arg(root.join("base_spatial")));
    let analyze_out = run_ok(vidadapt()
        .arg("analyze-weights")
        .arg("--before")
        .arg(root.join("base"))
        .arg("--after")
        .arg(root.join("base_spatial"))
        .args(["--domain", "spatial"])
        .arg("--out")
        .arg(root.join("report.json")));
    assert!(analyze_out.contains("cross_attention"));
    assert!(root.join("report.txt").is_file());

    // Identical checkpoints give an all-zero report.
    let zero_out = run_ok(vidadapt()
        .arg("analyze-weights")
        .arg("--before")
        .arg(root.join("base"))
        .arg("--after")
        .arg(root.join("base"))
        .args(["--domain", "spatial"])
        .arg("--out")
        .arg(root.join("report_zero.json")));
    for line in zero_out.lines() {
        if line.trim_start().starts_with(['c', 's', 'f', 'o'])
            && line.contains("0.")
            && !line.contains("wrote")
        {
            assert!(line.contains("0.000000"), "expected zero deltas: {line}");
        }
    }

    // Charts from the report and a training log.
    run_ok(vidadapt()
        .arg("plot-report")
        .arg("--report")
        .arg(root.join("report.json"))
        .arg("--out")
        .arg(root.join("report.svg")));
    assert!(std::fs::read_to_string(root.join("report.svg")).unwrap().starts_with("<svg"));
    run_ok(vidadapt()
        .arg("plot-report")
        .arg("--log")
        .arg(root.join("subject_ckpt/stage2_log.jsonl"))
        .arg("--out")
        .arg(root.join("loss.svg")));

    // Evaluate generated videos against the subject references.
    let videos = root.join("eval_videos");
    std::fs::create_dir_all(&videos).unwrap();
    std::fs::copy(root.join("gen_a/video.vt"), videos.join("gen_a.vt")).unwrap();
    std::fs::copy(root.join("gen_subject/video.vt"), videos.join("gen_subject.vt")).unwrap();
    std::fs::write(
        root.join("prompts.tsv"),
        format!("gen_a\ta s* {class_word} drifting\ngen_subject\ta s* {class_word}\n"),
    )
    .unwrap();
    let eval_out = run_ok(vidadapt()
        .arg("evaluate")
        .arg("--config")
        .arg(&config)
        .arg("--videos")
        .arg(&videos)
        .arg("--prompts")
        .arg(root.join("prompts.tsv"))
        .arg("--references")
        .arg(root.join("subject_images"))
        .arg("--out")
        .arg(root.join("eval")));
    assert!(eval_out.contains("gen_a"));
    assert!(root.join("eval/records.jsonl").is_file());
    assert!(root.join("eval/aggregate.json").is_file());

    // Determinism of the evaluation report bytes.
    run_ok(vidadapt()
        .arg("evaluate")
        .arg("--config")
        .arg(&config)
        .arg("--videos")
        .arg(&videos)
        .arg("--prompts")
        .arg(root.join("prompts.tsv"))
        .arg("--references")
        .arg(root.join("subject_images"))
        .arg("--out")
        .arg(root.join("eval2")));
    assert_eq!(
        std::fs::read(root.join("eval/report.txt")).unwrap(),
        std::fs::read(root.join("eval2/report.txt")).unwrap()
    );
}

#[test]
fn unknown_flags_and_bad_config_fail_cleanly() {
    let out = vidadapt().arg("compose").arg("--definitely-not-a-flag").output().unwrap();
    assert!(!out.status.success());

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "not_a_real_key = 1\n").unwrap();
    let out = vidadapt()
        .args(["pretrain-base", "--corpus-size", "2"])
        .arg("--config")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "one-line diagnostic expected, got: {stderr}");
}
