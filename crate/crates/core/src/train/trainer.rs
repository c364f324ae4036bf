//! Stage A (base denoiser) and stage B (control branch) training loops.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::config::{Objective, Stage, TrainConfig};
use super::optim::{AdamW, AdamWConfig};
use crate::control::{build_union_mask, controlled_graph, init_control};
use crate::denoiser::{embed_conditioning, init_base, unet_graph, AttnTrace};
use crate::diffusion::{add_noise, image_to_latent, NoiseSchedule};
use crate::error::{Error, Result};
use crate::losses::{ca_graph, ldm_graph, mask_graph, total_graph};
use crate::nn::{Ctx, ParamStore};
use crate::numerics::{Tensor, Var};
use crate::par;
use crate::synthdata::DatasetRecord;

/// Parameter prefixes updated in each stage. Token tables live under
/// `base.` and so stay frozen in stage B.
pub const BASE_TRAINABLE: [&str; 1] = ["base."];
pub const CONTROL_TRAINABLE: [&str; 2] = ["ctrl.", "adapt."];
/// Prefix whose checksum must not change during stage B.
pub const FROZEN_PREFIX: &str = "base.";
/// Attention layers supervised by the attention loss: the base decoder
/// blocks and every control-branch block.
pub const CA_LAYERS: [&str; 4] = ["base.dec2", "base.dec1", "ctrl.enc1", "ctrl.enc2"];

pub const LOSS_CSV_HEADER: &str = "step,l_ldm,l_ca,l_mask,l_total";

/// Batch-mean loss components of one optimizer step, measured before the
/// update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub l_ldm: f64,
    pub l_ca: f64,
    pub l_mask: f64,
    pub l_total: f64,
}

impl LossRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.l_ldm, self.l_ca, self.l_mask, self.l_total
        )
    }
}

pub fn write_loss_csv<W: Write>(mut w: W, rows: &[LossRow]) -> Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Loss terms of one training example.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Components {
    pub ldm: f64,
    pub ca: f64,
    pub mask: f64,
    pub total: f64,
}

/// One example of a batch: which record, which timestep, which noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub record: usize,
    pub t: usize,
    pub noise_seed: u64,
}

impl Draw {
    pub fn noise(&self, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }
}

/// Record index and timestep uniform, noise seeded per example.
pub fn draw_batch(rng: &mut ChaCha8Rng, records: usize, batch: usize, t_steps: usize) -> Vec<Draw> {
    (0..batch)
        .map(|_| Draw {
            record: rng.random_range(0..records),
            t: rng.random_range(0..t_steps),
            noise_seed: rng.next_u64(),
        })
        .collect()
}

/// Builds the objective of `stage` for one example on `ctx` and returns
/// the scalar to differentiate plus every logged component.
fn objective_graph(
    ctx: &mut Ctx,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rec: &DatasetRecord,
    t: usize,
    eps: &Tensor,
) -> Result<(Var, Components)> {
    let z0 = image_to_latent(&rec.image);
    let z_t = add_noise(&z0, t, eps, sched)?;
    let z = ctx.input(z_t);
    let eps_v = ctx.input(eps.clone());
    match cfg.stage {
        Stage::Base => {
            let cond = embed_conditioning(ctx, &cfg.model.unet, t, &rec.tokens)?;
            let (eps_hat, _) = unet_graph(ctx, &cfg.model.unet, z, &cond, None)?;
            let l = ldm_graph(&mut ctx.g, eps_hat, eps_v)?;
            let v = ctx.value(l).data()[0];
            Ok((
                l,
                Components {
                    ldm: v,
                    total: v,
                    ..Default::default()
                },
            ))
        }
        Stage::Control => {
            let pass = controlled_graph(ctx, &cfg.model, z, t, &rec.tokens, &rec.bundle)?;
            let ldm = ldm_graph(&mut ctx.g, pass.eps, eps_v)?;
            let ldm_v = ctx.value(ldm).data()[0];
            if cfg.objective == Objective::LdmOnly {
                return Ok((
                    ldm,
                    Components {
                        ldm: ldm_v,
                        total: ldm_v,
                        ..Default::default()
                    },
                ));
            }
            let traces: Vec<AttnTrace> = pass
                .base_traces
                .iter()
                .chain(&pass.control_traces)
                .filter(|tr| CA_LAYERS.contains(&tr.layer_id.as_str()))
                .cloned()
                .collect();
            let ca = ca_graph(&mut ctx.g, &traces, &rec.segments)?;
            let union = build_union_mask(&rec.bundle, cfg.model.unet.resolution)?;
            let mask = mask_graph(&mut ctx.g, pass.eps, eps_v, &union)?;
            let total = total_graph(&mut ctx.g, ldm, ca, mask, cfg.lambda_ca, cfg.lambda_mask)?;
            let c = Components {
                ldm: ldm_v,
                ca: ctx.value(ca).data()[0],
                mask: ctx.value(mask).data()[0],
                total: ctx.value(total).data()[0],
            };
            Ok((total, c))
        }
    }
}

fn trainable(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Base => &BASE_TRAINABLE,
        Stage::Control => &CONTROL_TRAINABLE,
    }
}

/// Loss components and gradients of every trainable parameter for one
/// example.
pub fn example_gradients(
    store: &ParamStore,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rec: &DatasetRecord,
    t: usize,
    eps: &Tensor,
) -> Result<(Components, BTreeMap<String, Tensor>)> {
    let mut ctx = Ctx::new(store, trainable(cfg.stage));
    let (loss, c) = objective_graph(&mut ctx, cfg, sched, rec, t, eps)?;
    let grads = ctx.param_grads(loss)?;
    Ok((c, grads))
}

/// Loss components of one example without building gradients.
pub fn example_loss(
    store: &ParamStore,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rec: &DatasetRecord,
    t: usize,
    eps: &Tensor,
) -> Result<Components> {
    let mut ctx = Ctx::frozen(store);
    Ok(objective_graph(&mut ctx, cfg, sched, rec, t, eps)?.1)
}

/// Batch-mean components and gradients. Examples are evaluated in
/// parallel and reduced in batch order, so the result does not depend on
/// the thread count.
pub fn batch_gradients(
    store: &ParamStore,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    data: &[DatasetRecord],
    draws: &[Draw],
) -> Result<(Components, BTreeMap<String, Tensor>)> {
    let shape = data
        .first()
        .ok_or_else(|| Error::Input("dataset is empty".into()))?
        .image
        .shape()
        .to_vec();
    let per = par::map_indexed(draws.len(), |i| {
        let d = draws[i];
        let rec = data
            .get(d.record)
            .ok_or_else(|| Error::Index(format!("record {} outside 0..{}", d.record, data.len())))?;
        example_gradients(store, cfg, sched, rec, d.t, &d.noise(&shape))
    });
    let mut sum = Components::default();
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in per {
        let (c, g) = r?;
        sum.ldm += c.ldm;
        sum.ca += c.ca;
        sum.mask += c.mask;
        sum.total += c.total;
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&t)?,
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    let inv = 1.0 / draws.len() as f64;
    for g in grads.values_mut() {
        *g = g.scale(inv);
    }
    let mean = Components {
        ldm: sum.ldm * inv,
        ca: sum.ca * inv,
        mask: sum.mask * inv,
        total: sum.total * inv,
    };
    Ok((mean, grads))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRow>,
}

fn run(
    cfg: &TrainConfig,
    mut store: ParamStore,
    data: &[DatasetRecord],
    on_row: &mut dyn FnMut(&LossRow),
) -> Result<TrainOutput> {
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    });
    let frozen = store.checksum(FROZEN_PREFIX);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws = draw_batch(&mut rng, data.len(), cfg.batch_size, sched.steps());
        let (c, grads) = batch_gradients(&store, cfg, &sched, data, &draws)?;
        if !c.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        opt.step(&mut store, &grads)?;
        if cfg.stage == Stage::Control && store.checksum(FROZEN_PREFIX) != frozen {
            return Err(Error::Config(format!("frozen base weights changed at step {step}")));
        }
        let row = LossRow {
            step,
            l_ldm: c.ldm,
            l_ca: c.ca,
            l_mask: c.mask,
            l_total: c.total,
        };
        on_row(&row);
        log.push(row);
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            step: cfg.steps as u64,
            rng: RngState {
                seed: cfg.seed,
                word_pos: rng.get_word_pos(),
            },
            store,
        },
        log,
    })
}

/// Fresh base weights for `cfg`, as a zero-step checkpoint would hold them.
pub fn initial_base(cfg: &TrainConfig) -> Result<ParamStore> {
    init_base(&cfg.model.unet, cfg.seed)
}

/// Stage A: denoising objective only, every base parameter trainable.
pub fn train_base(cfg: &TrainConfig, data: &[DatasetRecord], on_row: &mut dyn FnMut(&LossRow)) -> Result<TrainOutput> {
    if cfg.stage != Stage::Base {
        return Err(Error::Config("train_base needs stage = base".into()));
    }
    run(cfg, initial_base(cfg)?, data, on_row)
}

/// Base weights of `base` plus a freshly initialised control branch.
pub fn initial_control(cfg: &TrainConfig, base: &Checkpoint) -> Result<ParamStore> {
    if base.config.model.unet != cfg.model.unet {
        return Err(Error::Config(format!(
            "U-Net shape {:?} does not match the base checkpoint {:?}",
            cfg.model.unet, base.config.model.unet
        )));
    }
    let mut store: ParamStore = base
        .store
        .with_prefix(FROZEN_PREFIX)
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect();
    let reference = init_base(&cfg.model.unet, 0)?;
    for (name, t) in reference.iter() {
        match store.get(name) {
            Some(have) if have.shape() == t.shape() => {}
            Some(have) => {
                return Err(Error::Config(format!(
                    "base tensor {name} is {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Config(format!("base checkpoint lacks {name}"))),
        }
    }
    init_control(&mut store, &cfg.model, cfg.seed)?;
    Ok(store)
}

/// Stage B: base frozen, control branch and adapters trained on the
/// weighted three-term objective.
pub fn train_control(
    cfg: &TrainConfig,
    base: &Checkpoint,
    data: &[DatasetRecord],
    on_row: &mut dyn FnMut(&LossRow),
) -> Result<TrainOutput> {
    if cfg.stage != Stage::Control {
        return Err(Error::Config("train_control needs stage = control".into()));
    }
    run(cfg, initial_control(cfg, base)?, data, on_row)
}

/// Mean of `f(row)` over rows `range` of `log`.
pub fn window_mean(log: &[LossRow], range: std::ops::Range<usize>, f: impl Fn(&LossRow) -> f64) -> f64 {
    let rows = &log[range];
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::UNetConfig;
    use crate::synthdata::generate_corpus;

    fn tiny(stage: Stage, steps: usize) -> TrainConfig {
        let mut c = TrainConfig {
            stage,
            steps,
            batch_size: 2,
            ..TrainConfig::default()
        };
        c.model.unet = UNetConfig::tiny();
        c
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let data = generate_corpus(1, 4).unwrap();
        let cfg = tiny(Stage::Base, 0);
        let out = train_base(&cfg, &data, &mut |_| {}).unwrap();
        assert_eq!(out.checkpoint.store, initial_base(&cfg).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn empty_dataset_is_input_error() {
        let cfg = tiny(Stage::Base, 1);
        assert!(matches!(train_base(&cfg, &[], &mut |_| {}), Err(Error::Input(_))));
    }

    #[test]
    fn stage_is_checked() {
        let data = generate_corpus(1, 2).unwrap();
        let cfg = tiny(Stage::Control, 1);
        assert!(matches!(train_base(&cfg, &data, &mut |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn control_rejects_mismatched_base() {
        let data = generate_corpus(1, 2).unwrap();
        let base = train_base(&tiny(Stage::Base, 0), &data, &mut |_| {})
            .unwrap()
            .checkpoint;
        let mut cfg = tiny(Stage::Control, 1);
        cfg.model.unet.base_channels = 4;
        assert!(matches!(
            train_control(&cfg, &base, &data, &mut |_| {}),
            Err(Error::Config(_))
        ));

        let mut broken = base.clone();
        broken.store.insert("base.enc1.attn.q", Tensor::zeros(&[3, 3]));
        let cfg = tiny(Stage::Control, 1);
        assert!(matches!(
            train_control(&cfg, &broken, &data, &mut |_| {}),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn control_steps_keep_base_frozen_and_log_rows() {
        let data = generate_corpus(2, 4).unwrap();
        let base = train_base(&tiny(Stage::Base, 2), &data, &mut |_| {})
            .unwrap()
            .checkpoint;
        let cfg = tiny(Stage::Control, 3);
        let out = train_control(&cfg, &base, &data, &mut |_| {}).unwrap();
        assert_eq!(
            out.checkpoint.store.checksum(FROZEN_PREFIX),
            base.store.checksum(FROZEN_PREFIX)
        );
        let steps: Vec<usize> = out.log.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1, 2]);
        for r in &out.log {
            assert!(r.l_ca > 0.0 && r.l_mask > 0.0);
            let want = r.l_ldm + 0.01 * r.l_ca + 0.01 * r.l_mask;
            assert!((r.l_total - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn batch_reduction_matches_sequential_sum() {
        let data = generate_corpus(3, 4).unwrap();
        let cfg = tiny(Stage::Base, 1);
        let store = initial_base(&cfg).unwrap();
        let sched = cfg.schedule().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = draw_batch(&mut rng, data.len(), 3, sched.steps());
        let (c, g) = batch_gradients(&store, &cfg, &sched, &data, &draws).unwrap();
        let mut ldm = 0.0;
        let mut acc: Option<Tensor> = None;
        for d in &draws {
            let (ci, gi) =
                example_gradients(&store, &cfg, &sched, &data[d.record], d.t, &d.noise(&[3, 16, 16])).unwrap();
            ldm += ci.ldm;
            let w = gi["base.conv_in.w"].clone();
            acc = Some(match acc {
                None => w,
                Some(a) => a.add(&w).unwrap(),
            });
        }
        assert_eq!(c.ldm, ldm * (1.0 / 3.0));
        assert!(g["base.conv_in.w"].bitwise_eq(&acc.unwrap().scale(1.0 / 3.0)));
    }

    #[test]
    fn csv_rows_are_formatted() {
        let mut buf = Vec::new();
        let row = LossRow {
            step: 3,
            l_ldm: 0.5,
            l_ca: 0.25,
            l_mask: 0.125,
            l_total: 0.75,
        };
        write_loss_csv(&mut buf, &[row]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,l_ldm,l_ca,l_mask,l_total\n3,0.5,0.25,0.125,0.75\n"
        );
    }
}
