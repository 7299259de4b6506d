//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion.
//! Failures are reported, not fatal, unless `FDN_ACCEPTANCE_STRICT=1`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use fdn_cli::checkpoint::{self, TrainState};
use fdn_cli::config::Config;
use fdn_cli::verify::{self, CheckOptions};
use fdn_core::data::{save_image, synth};
use fdn_core::{FlowModel, ModelConfig, Rng, Tensor};

const FDN: &str = env!("CARGO_BIN_EXE_fdn");

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn fdn(args: &[&str], cwd: &Path) -> Output {
    Command::new(FDN)
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn fdn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn invertibility() -> Verdict {
    let start = Instant::now();
    let config = ModelConfig::default();
    let mut rng = Rng::new(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut model = FlowModel::new(config.clone(), &mut rng).unwrap();
        model.randomize(&mut rng, 0.3);
        let y = Tensor::randn([1, 3, 64, 64], &mut rng).unwrap();
        let (z, _) = model.forward(&y).unwrap();
        worst = worst.max(model.inverse(&z).unwrap().max_rel_diff(&y).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-8 && secs <= 120.0,
        format!("max rel error {worst:.3e} over 100 models, {secs:.1}s"),
    )
}

fn logdet_oracle() -> Verdict {
    let opts = CheckOptions {
        logdet_trials: 20,
        ..CheckOptions::new(0)
    };
    let err = verify::logdet(&opts).unwrap();
    verdict(
        err <= 1e-3,
        format!("max |analytic - log|det J|| {err:.3e} over 20 seeds"),
    )
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let (worst, ok) = verify::gradients(&CheckOptions::new(0)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        ok && secs <= 300.0,
        format!("worst gradient error {worst:.3e}, {secs:.1}s"),
    )
}

fn actnorm_init() -> Verdict {
    let (m, v) = verify::actnorm_init(&CheckOptions::new(0)).unwrap();
    verdict(
        m <= 1e-10 && v <= 1e-8,
        format!("max |mean| {m:.3e}, max |var - 1| {v:.3e}"),
    )
}

fn identity_edit(work: &Path) -> Verdict {
    let dir = work.join("identity");
    let input = dir.join("in");
    fs::create_dir_all(&input).unwrap();
    let mut rng = Rng::new(5);
    let mut worst_bytes = 0usize;
    for (k, channels) in [1usize, 3].into_iter().enumerate() {
        let mut config =
            Config::parse("train.iters = 0\ntrain.sigma = 25\nmask.clean_fraction = 1\n").unwrap();
        config.in_channels = channels;
        config.n_sof = 2;
        config.dense_width = 8;
        let mut state = TrainState::new(config).unwrap();
        state.model.randomize(&mut rng, 0.3);
        let ckpt = dir.join(format!("model{k}.fdn"));
        checkpoint::save(&ckpt, &state).unwrap();
        let ext = if channels == 1 { "pgm" } else { "ppm" };
        for i in 0..3 {
            save_image(
                input.join(format!("img{i}.{ext}")),
                &synth::textured_blob(24, channels, &mut rng),
            )
            .unwrap();
        }
        let out = dir.join(format!("out{k}"));
        let o = fdn(
            &[
                "denoise",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--in",
                input.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
            work,
        );
        if !o.status.success() {
            return verdict(
                false,
                format!("denoise failed: {}", String::from_utf8_lossy(&o.stderr)),
            );
        }
        for i in 0..3 {
            let name = format!("img{i}.{ext}");
            let a = fs::read(input.join(&name)).unwrap();
            let b = fs::read(out.join(&name)).unwrap();
            worst_bytes +=
                a.iter().zip(&b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
        }
        fs::remove_dir_all(&input).unwrap();
        fs::create_dir_all(&input).unwrap();
    }
    verdict(
        worst_bytes == 0,
        format!("{worst_bytes} differing bytes over 6 images (gray and color)"),
    )
}

/// Data shared by the training criteria.
struct SmokeData {
    train: PathBuf,
    val: PathBuf,
    test: PathBuf,
}

fn smoke_data(work: &Path) -> SmokeData {
    let make = |name: &str, count: usize, seed: u64| {
        let dir = work.join(name);
        let o = fdn(
            &[
                "synth",
                "--out",
                dir.to_str().unwrap(),
                "--count",
                &count.to_string(),
                "--size",
                "32",
                "--seed",
                &seed.to_string(),
            ],
            work,
        );
        assert!(o.status.success(), "synth failed");
        dir
    };
    SmokeData {
        train: make("train", 2000, 100),
        val: make("val", 64, 200),
        test: make("test", 128, 300),
    }
}

fn smoke_config(data: &SmokeData, clean_fraction: &str) -> String {
    format!(
        "model.n_flow_blocks = 2\nmodel.n_sof = 4\nmodel.dense_width = 8\nmodel.in_channels = 1\n\
         train.lr = 1e-3\ntrain.batch = 16\ntrain.iters = 3000\ntrain.seed = 7\ntrain.sigma = 25\n\
         train.patch = 32\ntrain.val_every = 100\ntrain.checkpoint_every = 1000\ntrain.out_dir = run\n\
         data.train_dir = {}\ndata.val_dir = {}\nmask.clean_fraction = {clean_fraction}\n",
        data.train.display(),
        data.val.display()
    )
}

struct Run {
    dir: PathBuf,
    ok: bool,
    message: String,
}

impl Run {
    fn metrics(&self) -> String {
        fs::read_to_string(self.dir.join("run/metrics.txt")).unwrap_or_default()
    }

    fn checkpoints(&self) -> Vec<PathBuf> {
        checkpoint::list_checkpoints(&self.dir.join("run")).unwrap_or_default()
    }

    fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().pop().expect("checkpoint written")
    }

    /// `val iter=<t> psnr=<p>` entries.
    fn val_curve(&self) -> Vec<(u64, f64)> {
        self.metrics()
            .lines()
            .filter_map(|l| {
                let rest = l.strip_prefix("val iter=")?;
                let (t, p) = rest.split_once(" psnr=")?;
                Some((t.parse().ok()?, p.parse().ok()?))
            })
            .collect()
    }
}

fn train_run(work: &Path, name: &str, config: &str) -> Run {
    let dir = work.join(name);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("config.txt"), config).unwrap();
    let start = Instant::now();
    let o = fdn(&["train", "--config", "config.txt"], &dir);
    let message = format!(
        "{:.0}s{}",
        start.elapsed().as_secs_f64(),
        if o.status.success() {
            String::new()
        } else {
            format!(" error: {}", String::from_utf8_lossy(&o.stderr))
        }
    );
    Run {
        dir,
        ok: o.status.success(),
        message,
    }
}

/// Mean denoised and noisy PSNR on the held-out test set.
fn held_out(run: &Run, data: &SmokeData) -> Option<(f64, f64)> {
    let ckpt = run.final_checkpoint();
    let o = fdn(
        &[
            "eval",
            "--ckpt",
            ckpt.to_str()?,
            "--clean",
            data.test.to_str()?,
            "--sigma",
            "25",
            "--seed",
            "11",
        ],
        &run.dir,
    );
    let text = stdout(&o);
    let grab = |prefix: &str| -> Option<f64> {
        text.lines().find_map(|l| {
            l.strip_prefix(prefix)?
                .split_whitespace()
                .next()?
                .parse()
                .ok()
        })
    };
    Some((grab("denoised psnr ")?, grab("noisy psnr ")?))
}

fn smoke(run: &Run, data: &SmokeData) -> (Verdict, Option<f64>) {
    if !run.ok {
        return (verdict(false, run.message.clone()), None);
    }
    let curve = run.val_curve();
    let at100 = curve.iter().find(|(t, _)| *t == 100).map(|c| c.1);
    let last = curve.last().copied();
    let Some((den, noisy)) = held_out(run, data) else {
        return (verdict(false, "eval failed"), None);
    };
    let (Some(at100), Some((t_last, p_last))) = (at100, last) else {
        return (verdict(false, "validation curve missing"), Some(den));
    };
    let gain = den - noisy;
    let passed = gain >= 3.0 && p_last > at100 && t_last == 3000;
    (
        verdict(
            passed,
            format!(
                "held-out {den:.2} dB vs noisy {noisy:.2} dB (+{gain:.2}); val psnr {at100:.2} at 100 -> {p_last:.2} at {t_last}; {}",
                run.message
            ),
        ),
        Some(den),
    )
}

fn schedule(work: &Path) -> Verdict {
    let dir = work.join("schedule");
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    let mut rng = Rng::new(3);
    for i in 0..4 {
        save_image(
            data.join(format!("{i}.pgm")),
            &synth::textured_blob(8, 1, &mut rng),
        )
        .unwrap();
    }
    let config = format!(
        "model.n_flow_blocks = 1\nmodel.n_sof = 1\nmodel.dense_width = 4\nmodel.in_channels = 1\n\
         train.halve_every = 100\ntrain.iters = 102\ntrain.batch = 2\ntrain.patch = 8\ntrain.sigma = 25\n\
         train.out_dir = run\ndata.train_dir = {}\n",
        data.display()
    );
    let run = train_run(work, "schedule", &config);
    if !run.ok {
        return verdict(false, run.message);
    }
    let lrs: Vec<(u64, f64)> = run
        .metrics()
        .lines()
        .filter_map(|l| {
            let t = l
                .strip_prefix("iter=")?
                .split_whitespace()
                .next()?
                .parse()
                .ok()?;
            let lr = l
                .split_whitespace()
                .find_map(|f| f.strip_prefix("lr="))?
                .parse()
                .ok()?;
            Some((t, lr))
        })
        .collect();
    let before = lrs
        .iter()
        .filter(|(t, _)| *t < 100)
        .all(|(_, lr)| *lr == 2e-4);
    let at = lrs.iter().find(|(t, _)| *t == 100).map(|x| x.1);
    verdict(
        lrs.len() == 102 && before && at == Some(1e-4),
        format!(
            "{} metric lines, lr 2e-4 before t=100: {before}, lr at t=100: {at:?}",
            lrs.len()
        ),
    )
}

fn determinism(a: &Run, b: &Run) -> Verdict {
    if !a.ok || !b.ok {
        return verdict(false, "a run failed");
    }
    let same_metrics = a.metrics() == b.metrics() && !a.metrics().is_empty();
    let (ca, cb) = (a.checkpoints(), b.checkpoints());
    let names = |v: &[PathBuf]| {
        v.iter()
            .map(|p| p.file_name().unwrap().to_owned())
            .collect::<Vec<_>>()
    };
    let same_ckpt = !ca.is_empty()
        && names(&ca) == names(&cb)
        && ca
            .iter()
            .zip(&cb)
            .all(|(x, y)| fs::read(x).unwrap() == fs::read(y).unwrap());
    let reloaded = ca.last().is_some_and(|p| {
        checkpoint::load(p).is_ok_and(|s| checkpoint::encode(&s).unwrap() == fs::read(p).unwrap())
    });
    verdict(
        same_metrics && same_ckpt && reloaded,
        format!(
            "metrics identical: {same_metrics}, {} checkpoints identical: {same_ckpt}, reload re-encodes identically: {}",
            ca.len(),
            reloaded
        ),
    )
}

fn cmd_check(work: &Path) -> Verdict {
    let o = fdn(&["check"], work);
    let text = stdout(&o);
    let fails = text.lines().filter(|l| l.ends_with("FAIL")).count();
    let passes = text.lines().filter(|l| l.ends_with("PASS")).count();
    verdict(
        o.status.code() == Some(0) && fails == 0 && passes == 5,
        format!("exit {:?}, {passes} PASS, {fails} FAIL", o.status.code()),
    )
}

/// `FDN_ACCEPTANCE_ONLY=1,5,8` restricts the run to those criteria.
fn selected() -> impl Fn(u32) -> bool {
    let only: Option<Vec<u32>> = std::env::var("FDN_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    move |n| only.as_ref().is_none_or(|o| o.contains(&n))
}

fn main() {
    let want = selected();
    let work = tempfile::tempdir().unwrap();
    let work = work.path();
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n, name, v: Verdict| {
        println!(
            "criterion {n:>2} {name:<18} {} ({})",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, name, v));
    };

    if want(1) {
        report(1, "invertibility", invertibility());
    }
    if want(2) {
        report(2, "logdet-oracle", logdet_oracle());
    }
    if want(3) {
        report(3, "gradient-oracle", gradient_oracle());
    }
    if want(4) {
        report(4, "actnorm-init", actnorm_init());
    }
    if want(5) {
        report(5, "identity-edit", identity_edit(work));
    }
    if want(8) {
        report(8, "lr-schedule", schedule(work));
    }
    if want(10) {
        report(10, "cmd-check", cmd_check(work));
    }

    if want(6) || want(7) || want(9) {
        let data = smoke_data(work);
        let main_run = train_run(work, "smoke", &smoke_config(&data, "3/4"));
        let (v6, psnr_34) = smoke(&main_run, &data);
        if want(6) {
            report(6, "training-smoke", v6);
        }
        if want(7) {
            let small_run = train_run(work, "ablation", &smoke_config(&data, "1/8"));
            let psnr_18 = if small_run.ok {
                held_out(&small_run, &data).map(|x| x.0)
            } else {
                None
            };
            let v7 = match (psnr_34, psnr_18) {
                (Some(a), Some(b)) => verdict(
                    a >= b - 0.2,
                    format!("3/4: {a:.2} dB, 1/8: {b:.2} dB; {}", small_run.message),
                ),
                _ => verdict(false, format!("missing result; {}", small_run.message)),
            };
            report(7, "ablation-trend", v7);
        }
        if want(9) {
            let repeat = train_run(work, "repeat", &smoke_config(&data, "3/4"));
            report(9, "determinism", determinism(&main_run, &repeat));
        }
    }

    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        let names: Vec<_> = results
            .iter()
            .filter(|r| !r.2.passed)
            .map(|r| r.1)
            .collect();
        println!("acceptance: failing: {}", names.join(", "));
        if std::env::var("FDN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
