//! Toy-scale training: Nesterov momentum SGD with weight decay, stepwise
//! learning-rate decay, reflect-pad crop and flip augmentation, and CSV
//! metrics. Everything is deterministic given the model seed and the data
//! seed; the two random streams never mix.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::net::{NetError, Network};
use crate::ops::softmax_xent;
use crate::rng::SbRng;
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Op(#[from] crate::ops::OpError),
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimizer hyperparameters. `milestones` are 1-based epoch numbers at
/// whose start the learning rate is multiplied by `gamma`.
#[derive(Clone, Debug, Serialize)]
pub struct OptimSpec {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl OptimSpec {
    /// The usual schedule: drop the rate tenfold at 50% and 75% of the
    /// run. Very short runs keep a constant rate; a drop at epoch 1 would
    /// shadow the initial rate entirely.
    pub fn standard(epochs: usize) -> OptimSpec {
        let mut milestones = vec![epochs / 2, epochs * 3 / 4];
        milestones.retain(|&m| m >= 2);
        milestones.dedup();
        OptimSpec { lr: 0.1, momentum: 0.9, weight_decay: 1e-4, batch: 64, milestones, gamma: 0.1 }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(drops as i32)
    }
}

/// One Nesterov step on every parameter. Decay applies to all of them,
/// batch-norm scales and shifts included:
///   g' = g + wd * w
///   v  = mu * v - lr * g'
///   w  = w + mu * v - lr * g'
pub fn nesterov_step(value: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for i in 0..value.len() {
        let g = grad[i] + weight_decay * value[i];
        vel[i] = momentum * vel[i] - lr * g;
        value[i] += momentum * vel[i] - lr * g;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AugmentSpec {
    pub enabled: bool,
    /// Reflect padding width; crops are drawn from the padded frame.
    pub pad: usize,
    pub flip_p: f64,
}

impl Default for AugmentSpec {
    fn default() -> AugmentSpec {
        AugmentSpec { enabled: true, pad: 4, flip_p: 0.5 }
    }
}

fn reflect(q: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if q < 0 { -q } else if q >= n { 2 * (n - 1) - q } else { q };
    debug_assert!((0..n).contains(&r), "pad exceeds image size");
    r as usize
}

/// Write one augmented image: reflect-pad by `pad`, crop at `(dy, dx)`
/// (each in `0..=2*pad`), then mirror horizontally if `flip`. Composed per
/// pixel, no padded frame is materialized.
pub fn augment_into(src: &[f64], c: usize, h: usize, w: usize, dst: &mut [f64], pad: usize, dy: usize, dx: usize, flip: bool) {
    debug_assert_eq!(src.len(), c * h * w);
    debug_assert_eq!(dst.len(), src.len());
    for ch in 0..c {
        let plane = ch * h * w;
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - pad as isize, h);
            for x in 0..w {
                let px = if flip { w - 1 - x } else { x };
                let sx = reflect(px as isize + dx as isize - pad as isize, w);
                dst[plane + y * w + x] = src[plane + sy * w + sx];
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_test_err: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub optim: OptimSpec,
    pub augment: AugmentSpec,
    /// Seed for example order and augmentation draws; independent of the
    /// network's initialization seed.
    pub data_seed: u64,
    /// Where to write metrics.csv, run.json, and checkpoint/; nothing is
    /// written when unset.
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

impl TrainOptions {
    pub fn new(epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            optim: OptimSpec::standard(epochs),
            augment: AugmentSpec::default(),
            data_seed: 1,
            out_dir: None,
            verbose: false,
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a crate::net::NetworkConfig,
    model_seed: u64,
    data_seed: u64,
    epochs: usize,
    optim: &'a OptimSpec,
    augment: &'a AugmentSpec,
    train_set: &'a str,
    train_n: usize,
    test_set: &'a str,
    test_n: usize,
    final_test_err: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_err,test_err,seconds";

/// Error rate of the eval-mode network on `ds`, batched.
pub fn evaluate(net: &Network, ds: &Dataset, batch: usize) -> Result<f64, TrainError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, labels) = ds.gather(chunk);
        let logits = net.forward_eval(&x)?;
        wrong += count_errors(&logits, &labels);
    }
    Ok(wrong as f64 / ds.len() as f64)
}

fn count_errors(logits: &Tensor4, labels: &[usize]) -> usize {
    let s = logits.shape();
    let mut wrong = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * s.c..(i + 1) * s.c];
        // total_cmp keeps the argmax well-defined even on a diverged
        // network; the loss check is what reports divergence.
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .expect("nonempty row");
        if pred != label {
            wrong += 1;
        }
    }
    wrong
}

/// Run the full loop and return per-epoch statistics. Datasets are used
/// as given; normalize them first.
pub fn train(net: &mut Network, train_ds: &Dataset, test_ds: &Dataset, opts: &TrainOptions) -> Result<TrainReport, TrainError> {
    let mut root = SbRng::new(opts.data_seed);
    let mut shuffle_rng = root.fork();
    let mut aug_rng = root.fork();

    let img = train_ds.image_shape();
    let stride = img.c * img.h * img.w;
    let span = 2 * opts.augment.pad + 1;

    let mut csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let mut epochs = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for epoch in 1..=opts.epochs {
        let start = Instant::now();
        let lr = opts.optim.lr_at(epoch);
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut wrong = 0usize;
        for chunk in order.chunks(opts.optim.batch.max(1)) {
            let mut x = Tensor4::zeros(Shape4::new(chunk.len(), img.c, img.h, img.w));
            let mut labels = Vec::with_capacity(chunk.len());
            {
                let buf = x.data_mut();
                for (row, &i) in chunk.iter().enumerate() {
                    labels.push(train_ds.label(i));
                    let dst = &mut buf[row * stride..(row + 1) * stride];
                    if opts.augment.enabled {
                        let dy = aug_rng.index(span);
                        let dx = aug_rng.index(span);
                        let flip = aug_rng.bernoulli(opts.augment.flip_p);
                        augment_into(train_ds.image_slice(i), img.c, img.h, img.w, dst, opts.augment.pad, dy, dx, flip);
                    } else {
                        dst.copy_from_slice(train_ds.image_slice(i));
                    }
                }
            }

            let (logits, cache) = net.forward_train(&x)?;
            let (loss, dlogits) = softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            wrong += count_errors(&logits, &labels);

            net.zero_grads();
            net.backward(&cache, &dlogits);
            for p in net.params_mut() {
                let (value, grad, vel) = p.split_mut();
                nesterov_step(value, grad, vel, lr, opts.optim.momentum, opts.optim.weight_decay);
            }
        }

        let train_loss = loss_sum / train_ds.len() as f64;
        let train_err = wrong as f64 / train_ds.len() as f64;
        let test_err = evaluate(net, test_ds, opts.optim.batch)?;
        let seconds = start.elapsed().as_secs_f64();
        let stats = EpochStats { epoch, lr, train_loss, train_err, test_err, seconds };
        if let Some(f) = csv.as_mut() {
            writeln!(
                f,
                "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
                stats.epoch, stats.lr, stats.train_loss, stats.train_err, stats.test_err, stats.seconds
            )?;
        }
        if opts.verbose {
            println!(
                "epoch {:>3}  lr {:.4}  train_loss {:.4}  train_err {:.4}  test_err {:.4}  {:.1}s",
                stats.epoch, stats.lr, stats.train_loss, stats.train_err, stats.test_err, stats.seconds
            );
        }
        epochs.push(stats);
    }

    let final_test_err = epochs.last().map(|e| e.test_err).unwrap_or(1.0);
    if let Some(dir) = &opts.out_dir {
        let manifest = RunManifest {
            config: net.config(),
            model_seed: net.seed(),
            data_seed: opts.data_seed,
            epochs: opts.epochs,
            optim: &opts.optim,
            augment: &opts.augment,
            train_set: &train_ds.name,
            train_n: train_ds.len(),
            test_set: &test_ds.name,
            test_n: test_ds.len(),
            final_test_err,
        };
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        net.save_checkpoint(&dir.join("checkpoint"))?;
    }
    Ok(TrainReport { epochs, final_test_err })
}

/// Convenience used by tests and the property runner: write metrics for a
/// finished report to an arbitrary path.
pub fn write_metrics(path: &Path, report: &TrainReport) -> Result<(), TrainError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    for e in &report.epochs {
        writeln!(f, "{},{:.6},{:.6},{:.6},{:.6},{:.3}", e.epoch, e.lr, e.train_loss, e.train_err, e.test_err, e.seconds)?;
    }
    Ok(())
}
