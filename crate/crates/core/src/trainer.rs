//! Teacher–student training loop.
//!
//! Each step draws `b` labeled and `b` unlabeled images. The teacher labels
//! the weak (flipped) unlabeled views; the student sees strong views of both
//! batches, with pseudo-labels and reconstruction scenarios carried through
//! the same geometric transforms. The student minimises
//! `L_s + λ1·L_ul + λ2·L_rec` with SGD and the teacher tracks it by EMA.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, View};
use crate::checkpoint::Checkpoint;
use crate::config::{Mode, TrainConfig};
use crate::dataset::{self, Dataset, Partition, Sample, Sampler};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::net::Network;
use crate::ops;
use crate::optim::{poly_lr, SgdState};
use crate::pseudo;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Losses and counters of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub loss_s: f32,
    pub loss_ul: f32,
    pub loss_rec: f32,
    pub total: f32,
    pub lr: f64,
    /// Unlabeled pixels that received a pseudo-label.
    pub pseudo_pixels: usize,
    /// Unlabeled pixels excluded from reconstruction (uncertain).
    pub scenario3_pixels: usize,
    pub unlabeled_pixels: usize,
    /// Loss terms that were active but had no valid pixel.
    pub empty_losses: usize,
}

/// Auxiliary-decoder targets for the whole student batch.
#[derive(Clone, Debug, PartialEq)]
pub enum AuxTargets {
    None,
    Reconstruction {
        /// `[N, 3, H, W]`
        target: Tensor,
        /// `[N, 1, H, W]`
        mask: Tensor,
    },
    Fgbg {
        /// `N·H·W` binary labels with ignore.
        labels: Vec<u8>,
    },
}

/// Everything a student update needs, after augmentation and pseudo-labelling.
///
/// The first `labeled` images of `input` are labeled, the rest unlabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub input: Tensor,
    pub labeled: usize,
    /// Ground truth for labeled images, pseudo-labels for unlabeled ones.
    pub seg_labels: Vec<u8>,
    pub aux: AuxTargets,
    pub pseudo_pixels: usize,
    pub scenario3_pixels: usize,
    pub unlabeled_pixels: usize,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn stack_images(views: &[View]) -> Result<Tensor> {
    let (h, w) = (views[0].height(), views[0].width());
    let mut data = Vec::with_capacity(views.len() * 3 * h * w);
    for v in views {
        data.extend_from_slice(v.image.data());
    }
    Tensor::new([views.len(), 3, h, w], data)
}

/// Strong views of `views`, each mixed (if CutMix fires) with the next view
/// in the batch.
fn strong_views(views: &[View], ids: &[usize], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<View>> {
    (0..views.len())
        .map(|i| {
            let j = (i + 1) % views.len();
            Ok(augment::strong_aug(&views[i], &views[j], ids[j], &cfg.augment, rng)?.0)
        })
        .collect()
}

fn to_view(s: &Sample) -> View {
    View {
        image: s.image.clone(),
        maps: vec![s.label.clone()],
    }
}

/// Augments both batches and builds every target.
///
/// Labeled views carry one map (ground truth). Unlabeled views carry the
/// teacher's pseudo-labels and the reconstruction scenario map, both computed
/// on the weak view and then moved through the student's augmentation.
pub fn prepare_batch(
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    teacher: &Network,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<PreparedBatch> {
    let mode = cfg.train.mode;
    let objects = cfg.objects();
    let tau = cfg.pseudo.tau;

    let weak_l: Vec<View> = labeled
        .iter()
        .map(|s| augment::weak_aug(&to_view(s), &cfg.augment, rng).0)
        .collect();
    let ids_l: Vec<usize> = labeled.iter().map(|s| s.id).collect();
    let strong_l = strong_views(&weak_l, &ids_l, cfg, rng)?;

    let mut strong_u = Vec::new();
    let (mut pseudo_pixels, mut scenario3_pixels, mut unlabeled_pixels) = (0, 0, 0);
    if mode.uses_unlabeled() && !unlabeled.is_empty() {
        let weak_u: Vec<View> = unlabeled
            .iter()
            .map(|s| augment::weak_aug(&View::new(s.image.clone(), vec![]).expect("valid image"), &cfg.augment, rng).0)
            .collect();
        let probs = teacher.predict_probs(&stack_images(&weak_u)?)?;
        probs.check_finite("teacher probabilities")?;
        let mut with_maps = Vec::with_capacity(weak_u.len());
        for (i, v) in weak_u.into_iter().enumerate() {
            let p = probs.sample(i)?;
            let [_, c, h, w] = p.dims4()?;
            let p = p.reshape([c, h, w])?;
            let pl = pseudo::make_pseudo_labels(&p, tau)?;
            let scen = pseudo::scenario_map(&p, tau, &objects)?;
            pseudo_pixels += pl.labeled_pixels();
            scenario3_pixels += scen.iter().filter(|&&s| s == pseudo::UNCERTAIN).count();
            unlabeled_pixels += h * w;
            with_maps.push(View {
                image: v.image,
                maps: vec![pl.label, scen],
            });
        }
        let ids_u: Vec<usize> = unlabeled.iter().map(|s| s.id).collect();
        strong_u = strong_views(&with_maps, &ids_u, cfg, rng)?;
    }

    let all: Vec<View> = strong_l.iter().chain(&strong_u).cloned().collect();
    let input = stack_images(&all)?;
    let mut seg_labels = Vec::new();
    for v in &all {
        seg_labels.extend_from_slice(&v.maps[0]);
    }

    let aux = match mode {
        Mode::Rec | Mode::Forec => {
            let mut target = Vec::new();
            let mut mask = Vec::new();
            for (i, v) in all.iter().enumerate() {
                let t = match (mode, i < strong_l.len()) {
                    (Mode::Rec, _) => pseudo::standard_rec_target(&v.image)?,
                    (_, true) => pseudo::forec_target_labeled(&v.image, &v.maps[0], &objects)?,
                    (_, false) => pseudo::forec_target_labeled(&v.image, &v.maps[1], &[pseudo::FOREGROUND])?,
                };
                target.extend_from_slice(t.target.data());
                mask.extend_from_slice(t.mask.data());
            }
            let (n, h, w) = (all.len(), all[0].height(), all[0].width());
            AuxTargets::Reconstruction {
                target: Tensor::new([n, 3, h, w], target)?,
                mask: Tensor::new([n, 1, h, w], mask)?,
            }
        }
        Mode::Fgbg => AuxTargets::Fgbg {
            labels: pseudo::fgbg_target(&seg_labels, &objects),
        },
        Mode::Supervised | Mode::Baseline => AuxTargets::None,
    };

    Ok(PreparedBatch {
        input,
        labeled: strong_l.len(),
        seg_labels,
        aux,
        pseudo_pixels,
        scenario3_pixels,
        unlabeled_pixels,
    })
}

/// Splits an NCHW tensor after the first `n` samples.
fn split(t: &Tensor, n: usize) -> Result<(Tensor, Option<Tensor>)> {
    let [total, c, h, w] = t.dims4()?;
    let len = c * h * w;
    let head = Tensor::new([n, c, h, w], t.data()[..n * len].to_vec())?;
    let tail = (total > n)
        .then(|| Tensor::new([total - n, c, h, w], t.data()[n * len..].to_vec()))
        .transpose()?;
    Ok((head, tail))
}

/// Joins the gradients of two halves, scaling each.
fn join_scaled(a: &Tensor, sa: f32, b: Option<&Tensor>, sb: f32) -> Result<Tensor> {
    let [n, c, h, w] = a.dims4()?;
    let mut data: Vec<f32> = a.data().iter().map(|v| v * sa).collect();
    let mut total = n;
    if let Some(b) = b {
        data.extend(b.data().iter().map(|v| v * sb));
        total += b.shape()[0];
    }
    Tensor::new([total, c, h, w], data)
}

/// Mean of a loss over the labeled and unlabeled halves, each with its own
/// normalization, returned with the joined gradient scaled by `weight`.
fn split_loss(
    out: &Tensor,
    labeled: usize,
    weight: f32,
    empty: &mut usize,
    f: impl Fn(&Tensor, std::ops::Range<usize>) -> Result<ops::LossOutput<f32>>,
) -> Result<(f32, Tensor)> {
    let (ol, ou) = split(out, labeled)?;
    let ll = f(&ol, 0..labeled)?;
    *empty += (ll.valid == 0) as usize;
    match ou {
        None => Ok((ll.loss, join_scaled(&ll.grad, weight, None, 0.0)?)),
        Some(ou) => {
            let lu = f(&ou, labeled..out.shape()[0])?;
            *empty += (lu.valid == 0) as usize;
            let half = 0.5f32 * weight;
            Ok((0.5 * (ll.loss + lu.loss), join_scaled(&ll.grad, half, Some(&lu.grad), half)?))
        }
    }
}

/// Computes all losses and the student's parameter gradients for one batch.
/// Nothing is updated.
pub fn losses_and_grads(student: &Network, batch: &PreparedBatch, cfg: &TrainConfig) -> Result<(StepLosses, Vec<Tensor>)> {
    let (l1, l2) = (cfg.loss.lambda1 as f32, cfg.loss.lambda2 as f32);
    let with_aux = !matches!(batch.aux, AuxTargets::None);
    let mut tape = Tape::new();
    let fv = student.forward_on_tape(&mut tape, &batch.input, with_aux)?;
    let logits = tape.value(fv.logits);
    let [n, _, h, w] = logits.dims4()?;
    let hw = h * w;
    let nl = batch.labeled;
    let mut empty = 0;

    let (logits_l, logits_u) = split(logits, nl)?;
    let sup = ops::softmax_ce(&logits_l, &batch.seg_labels[..nl * hw])?;
    empty += (sup.valid == 0) as usize;
    let (loss_ul, grad_ul) = match &logits_u {
        Some(lu) => {
            let out = ops::softmax_ce(lu, &batch.seg_labels[nl * hw..])?;
            (out.loss, Some(out.grad))
        }
        None => (0.0, None),
    };
    let seg_grad = join_scaled(&sup.grad, 1.0, grad_ul.as_ref(), l1)?;

    let mut seeds = vec![(fv.logits, seg_grad)];
    let mut loss_rec = 0.0f32;
    if let Some((_, aux_out)) = fv.aux {
        let out = tape.value(aux_out);
        let (loss, grad) = match &batch.aux {
            AuxTargets::Reconstruction { target, mask } => split_loss(out, nl, l2, &mut empty, |o, r| {
                let t = Tensor::new(o.shape().to_vec(), target.data()[r.start * 3 * hw..r.end * 3 * hw].to_vec())?;
                let m = Tensor::new([r.len(), 1, h, w], mask.data()[r.start * hw..r.end * hw].to_vec())?;
                ops::masked_mse(o, &t, &m)
            })?,
            AuxTargets::Fgbg { labels } => split_loss(out, nl, l2, &mut empty, |o, r| {
                ops::softmax_ce(o, &labels[r.start * hw..r.end * hw])
            })?,
            AuxTargets::None => unreachable!("aux decoder only runs with targets"),
        };
        loss_rec = loss;
        seeds.push((aux_out, grad));
    }
    debug_assert_eq!(n, batch.len());

    let total = sup.loss + l1 * loss_ul + l2 * loss_rec;
    for (name, v) in [("loss_s", sup.loss), ("loss_ul", loss_ul), ("loss_rec", loss_rec), ("total", total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: name.to_string() });
        }
    }
    let shapes: Vec<&[usize]> = student.params().iter().map(|p| p.shape()).collect();
    let grads = tape.backward(seeds)?.dense(&shapes);
    Ok((
        StepLosses {
            loss_s: sup.loss,
            loss_ul,
            loss_rec,
            total,
            lr: 0.0,
            pseudo_pixels: batch.pseudo_pixels,
            scenario3_pixels: batch.scenario3_pixels,
            unlabeled_pixels: batch.unlabeled_pixels,
            empty_losses: empty,
        },
        grads,
    ))
}

/// One full update: targets, gradients, SGD at `poly_lr(step)`, then EMA.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    student: &mut Network,
    teacher: &mut Network,
    sgd: &mut SgdState,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    cfg: &TrainConfig,
    step: usize,
    total_steps: usize,
    rng: &mut impl Rng,
) -> Result<StepLosses> {
    let batch = prepare_batch(labeled, unlabeled, teacher, cfg, rng)?;
    let (mut losses, grads) = losses_and_grads(student, &batch, cfg).map_err(|e| step_error(e, step))?;
    losses.lr = poly_lr(cfg.optim.lr0, step, total_steps, cfg.optim.power)?;
    let names = student.names().to_vec();
    sgd.step(student.params_mut(), &grads, &names, losses.lr)
        .map_err(|e| step_error(e, step))?;
    teacher.ema_update(student, cfg.train.ema_alpha)?;
    Ok(losses)
}

fn step_error(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { what } => Error::NonFinite {
            what: format!("{what} at step {step}"),
        },
        e => e,
    }
}

/// mIoU of `net` over the given samples.
pub fn evaluate(net: &Network, data: &Dataset, ids: &[usize]) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(net.config().num_classes);
    for chunk in ids.chunks(16) {
        let (h, w) = (data.meta.height, data.meta.width);
        let mut stacked = Vec::with_capacity(chunk.len() * 3 * h * w);
        for &i in chunk {
            stacked.extend_from_slice(data.sample(i).image.data());
        }
        let pred = net.predict(&Tensor::new([chunk.len(), 3, h, w], stacked)?)?;
        let gt: Vec<u8> = chunk.iter().flat_map(|&i| data.sample(i).label.iter().copied()).collect();
        cm.accumulate(&pred, &gt)?;
    }
    cm.miou()
}

/// One metrics.csv row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub step: usize,
    /// Learning rate for the next step, `poly_lr(lr0, step, total)`.
    pub lr: f64,
    pub loss_s: Option<f32>,
    pub loss_ul: Option<f32>,
    pub loss_rec: Option<f32>,
    pub total: Option<f32>,
    pub pseudo_pixel_frac: Option<f64>,
    pub scenario3_frac: Option<f64>,
    pub val_miou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub student: Network,
    pub teacher: Network,
    pub checkpoint: Checkpoint,
    pub partition: Partition,
    pub final_report: IouReport,
    pub empty_losses: usize,
}

impl TrainOutcome {
    pub fn final_miou(&self) -> f64 {
        self.final_report.mean
    }
}

/// Derives an independent seed for one purpose from the run seed.
fn subseed(seed: u64, purpose: u64) -> u64 {
    dataset::splitmix64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Steps per epoch: `ceil(unlabeled / b)`, or `ceil(labeled / b)` without an
/// unlabeled pool.
pub fn steps_per_epoch(partition: &Partition, b: usize) -> usize {
    let pool = if partition.unlabeled.is_empty() {
        partition.labeled.len()
    } else {
        partition.unlabeled.len()
    };
    pool.div_ceil(b)
}

/// Trains on an in-memory dataset. `on_row` sees every CSV row as it is produced.
pub fn train(cfg: &TrainConfig, data: &Dataset, mut on_row: impl FnMut(&EpochRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.net.num_classes != data.meta.num_classes() {
        return Err(Error::Config(format!(
            "net.num_classes = {} but the dataset has {} classes",
            cfg.net.num_classes,
            data.meta.num_classes()
        )));
    }
    let seed = cfg.train.seed;
    let mode = cfg.train.mode;
    let b = cfg.train.batch_size;
    let partition = dataset::partition(&data.meta, cfg.train.labeled_fraction, subseed(seed, 1))?;
    if mode.uses_unlabeled() && partition.unlabeled.is_empty() {
        return Err(Error::EmptyPool("unlabeled"));
    }
    let (mut student, mut teacher) = Network::build(cfg.net, mode.aux_head(), subseed(seed, 2))?;
    let mut sgd = SgdState::new(cfg.optim, student.params());
    let mut sampler = Sampler::new(&partition)?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 3));

    let per_epoch = steps_per_epoch(&partition, b);
    let total_steps = (per_epoch * cfg.train.epochs).max(1);
    let mut rows = Vec::with_capacity(cfg.train.epochs + 1);
    let mut report = evaluate(&teacher, data, &partition.validation)?;
    let row = EpochRow {
        epoch: 0,
        step: 0,
        lr: poly_lr(cfg.optim.lr0, 0, total_steps, cfg.optim.power)?,
        loss_s: None,
        loss_ul: None,
        loss_rec: None,
        total: None,
        pseudo_pixel_frac: None,
        scenario3_frac: None,
        val_miou: report.mean,
    };
    on_row(&row);
    rows.push(row);

    let mut step = 0;
    let mut empty_losses = 0;
    for epoch in 1..=cfg.train.epochs {
        let mut sums = [0.0f64; 4];
        let (mut pseudo, mut scen3, mut upix) = (0usize, 0usize, 0usize);
        for _ in 0..per_epoch {
            let lids = sampler.labeled(b, &mut rng);
            let uids = if mode.uses_unlabeled() {
                sampler.unlabeled(b, &mut rng)?
            } else {
                Vec::new()
            };
            let ls: Vec<&Sample> = lids.iter().map(|&i| data.sample(i)).collect();
            let us: Vec<&Sample> = uids.iter().map(|&i| data.sample(i)).collect();
            let l = train_step(&mut student, &mut teacher, &mut sgd, &ls, &us, cfg, step, total_steps, &mut rng)?;
            for (s, v) in sums.iter_mut().zip([l.loss_s, l.loss_ul, l.loss_rec, l.total]) {
                *s += v as f64;
            }
            pseudo += l.pseudo_pixels;
            scen3 += l.scenario3_pixels;
            upix += l.unlabeled_pixels;
            empty_losses += l.empty_losses;
            step += 1;
        }
        report = evaluate(&teacher, data, &partition.validation)?;
        let mean = |s: f64| Some((s / per_epoch as f64) as f32);
        let frac = |c: usize| Some(if upix == 0 { 0.0 } else { c as f64 / upix as f64 });
        let row = EpochRow {
            epoch,
            step,
            lr: poly_lr(cfg.optim.lr0, step, total_steps, cfg.optim.power)?,
            loss_s: mean(sums[0]),
            loss_ul: mean(sums[1]),
            loss_rec: mean(sums[2]),
            total: mean(sums[3]),
            pseudo_pixel_frac: frac(pseudo),
            scenario3_frac: frac(scen3),
            val_miou: report.mean,
        };
        on_row(&row);
        rows.push(row);
    }

    let mut rng_state = [0u8; 32];
    rng.fill(&mut rng_state);
    let checkpoint = Checkpoint::from_pair(&student, &teacher, step as u64, rng_state);
    Ok(TrainOutcome {
        rows,
        student,
        teacher,
        checkpoint,
        partition,
        final_report: report,
        empty_losses,
    })
}

pub fn write_csv(rows: &[EpochRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::file(path))?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Trains and writes `metrics.csv`, `final.ckpt` and `resolved-config.json`
/// into `out`.
pub fn run(cfg: &TrainConfig, out: impl AsRef<Path>, on_row: impl FnMut(&EpochRow)) -> Result<TrainOutcome> {
    let out = out.as_ref();
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("data.path is not set".into()))?;
    if !path.join("meta.json").is_file() {
        return Err(Error::Config(format!("no dataset at {}", path.display())));
    }
    let data = Dataset::load(path)?;
    fs::create_dir_all(out).map_err(Error::file(out))?;
    let resolved = out.join("resolved-config.json");
    fs::write(&resolved, cfg.to_json()).map_err(Error::file(&resolved))?;
    let outcome = train(cfg, &data, on_row)?;
    write_csv(&outcome.rows, out.join("metrics.csv"))?;
    outcome.checkpoint.save(out.join("final.ckpt"))?;
    Ok(outcome)
}
