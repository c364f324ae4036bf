use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use kronctl::control::ConditionBundle;
use kronctl::denoiser::TokenSequence;
use kronctl::synthdata::{encode_prompt, generate_corpus, read_dataset, write_dataset};
use kronctl::train::{
    bench_params, evaluate, parse_kv, ppm_bytes, sample_image, toy_manifest, train_base, train_control,
    write_bench_csv, write_loss_csv, Checkpoint, LossRow, Manifest, Stage, TrainConfig, DEFAULT_EVAL_STEPS,
};

#[derive(Parser)]
#[command(
    name = "kronctl",
    version,
    about = "Toy controllable diffusion with Kronecker adapters"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base denoiser (stage A).
    TrainBase {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss CSV; defaults to the checkpoint path with `.csv` appended.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the control branch and adapters on a frozen base (stage B).
    TrainControl {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sample one image as binary PPM.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt words, e.g. "red square and blue circle".
        #[arg(long)]
        prompt: Option<String>,
        /// Index of the dataset record whose conditions (and, without
        /// --prompt, tokens) drive the sample.
        #[arg(long)]
        cond_record: Option<usize>,
        /// Dataset holding --cond-record.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EVAL_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score conditioned and unconditioned samples of the first N records.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_EVAL_STEPS)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and memory counts of adapter schemes.
    Bench {
        /// Layer manifest; defaults to the adapted layers of the default model.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, stage: Stage) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut map = parse_kv(&text)?;
    match map.get("stage") {
        Some(s) if s != stage.name() => bail!("config says stage = {s}, command needs {}", stage.name()),
        Some(_) => {}
        None => {
            map.insert("stage".into(), stage.name().into());
        }
    }
    Ok(TrainConfig::from_map(map)?)
}

fn progress(stage: &'static str, total: usize) -> impl FnMut(&LossRow) {
    move |r: &LossRow| {
        if (r.step + 1).is_multiple_of(100) || r.step + 1 == total {
            eprintln!(
                "{stage} step {}/{total}: ldm {:.5} ca {:.5} mask {:.5} total {:.5}",
                r.step + 1,
                r.l_ldm,
                r.l_ca,
                r.l_mask,
                r.l_total
            );
        }
    }
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".csv");
        s.into()
    })
}

fn finish(out: &Path, log: Option<PathBuf>, res: kronctl::train::TrainOutput) -> Result<()> {
    res.checkpoint.save(out)?;
    let lp = log_path(out, log);
    write_loss_csv(BufWriter::new(File::create(&lp)?), &res.log)?;
    eprintln!("wrote {} and {}", out.display(), lp.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { seed, count, out } => {
            let recs = generate_corpus(seed, count)?;
            write_dataset(&out, &recs)?;
            eprintln!("wrote {count} records to {}", out.display());
        }
        Cmd::TrainBase { config, data, out, log } => {
            let cfg = load_config(config.as_deref(), Stage::Base)?;
            let recs = read_dataset(&data)?;
            let res = train_base(&cfg, &recs, &mut progress("base", cfg.steps))?;
            finish(&out, log, res)?;
        }
        Cmd::TrainControl {
            config,
            base,
            data,
            out,
            log,
        } => {
            let cfg = load_config(config.as_deref(), Stage::Control)?;
            let base = Checkpoint::load(&base)?;
            let recs = read_dataset(&data)?;
            let res = train_control(&cfg, &base, &recs, &mut progress("control", cfg.steps))?;
            finish(&out, log, res)?;
        }
        Cmd::Sample {
            ckpt,
            prompt,
            cond_record,
            data,
            steps,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let record = match (cond_record, data) {
                (Some(i), Some(d)) => {
                    let recs = read_dataset(&d)?;
                    let n = recs.len();
                    Some(
                        recs.into_iter()
                            .nth(i)
                            .with_context(|| format!("record {i} outside 0..{n}"))?,
                    )
                }
                (Some(_), None) => bail!("--cond-record needs --data"),
                (None, _) => None,
            };
            let tokens = match (&prompt, &record) {
                (Some(p), _) => TokenSequence::new(encode_prompt(p)?)?,
                (None, Some(r)) => r.tokens.clone(),
                (None, None) => bail!("give --prompt or --cond-record"),
            };
            let bundle = record.map_or_else(ConditionBundle::empty, |r| r.bundle);
            let sched = ck.config.schedule()?;
            let img = sample_image(&ck.store, &ck.config.model, &sched, &tokens, &bundle, steps, seed, None)?;
            fs::write(&out, ppm_bytes(&img)?)?;
            eprintln!("wrote {}", out.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            n,
            steps,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let recs = read_dataset(&data)?;
            let sched = ck.config.schedule()?;
            let report = evaluate(&ck.store, &ck.config.model, &sched, &recs, n, steps)?;
            report.write_csv(BufWriter::new(File::create(&out)?))?;
            let [s, e, us, ue] = report.means();
            eprintln!("seg_iou {s:.4} (uncond {us:.4})  edge_ssim {e:.4} (uncond {ue:.4})");
        }
        Cmd::Bench { manifest, out } => {
            let m = match manifest {
                Some(p) => {
                    Manifest::parse(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?
                }
                None => toy_manifest(&Default::default(), Default::default())?,
            };
            let rows = bench_params(&m)?;
            write_bench_csv(BufWriter::new(File::create(&out)?), &rows)?;
            for r in &rows {
                eprintln!("{:<11} {:>10} params {:>12} bytes", r.scheme, r.params, r.memory_bytes);
            }
        }
    }
    Ok(())
}
