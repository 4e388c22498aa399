//! Training objectives, the training loop and ensemble inference.
//!
//! For a member `I` of the subset collection the network sees the mean of
//! the per-fold FBPs of its folds. `sparse2inverse` compares the forward
//! projection of the output with the measured rows of the complementary
//! angles; `noise2inverse` compares the output with the FBP of those rows.
//! Both losses are means over residual elements.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use crate::error::{invalid, Error, Result};
use crate::metrics::{psnr, ssim};
use crate::neural::{adam_step, Descriptor, NetworkParams, OptimState, Tape, Tensor};
use crate::split::{make_partition, network_input, target_data, Partition, SubsetSelection};
use crate::tomo::{fbp, radon, Filter, Geometry, Image, Sinogram};

/// Anything that maps an image to an image: a network or a frozen stand-in.
pub trait ImageOperator {
    fn apply(&self, input: &Image) -> Result<Image>;
}

impl ImageOperator for NetworkParams {
    fn apply(&self, input: &Image) -> Result<Image> {
        self.forward(input)
    }
}

impl<F: Fn(&Image) -> Result<Image>> ImageOperator for F {
    fn apply(&self, input: &Image) -> Result<Image> {
        self(input)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Method {
    /// Projection-domain loss on the complementary angles.
    #[default]
    Sparse2Inverse,
    /// Image-domain loss against the complementary-angle FBP.
    Noise2Inverse,
}

impl Method {
    /// Rates for long (2000 epoch) schedules; desk-scale runs use 5x these.
    pub fn long_schedule_learning_rate(self) -> f64 {
        match self {
            Method::Sparse2Inverse => 2e-4,
            Method::Noise2Inverse => 1e-4,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s2i" | "sparse2inverse" | "proposed" => Ok(Method::Sparse2Inverse),
            "n2i" | "noise2inverse" => Ok(Method::Noise2Inverse),
            other => invalid(format!("unknown training method '{other}'")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sparse2Inverse => "s2i",
            Method::Noise2Inverse => "n2i",
        })
    }
}

struct MemberData {
    input: Image,
    target_ids: Vec<usize>,
    /// Complement rows (s2i) or complement FBP (n2i), flattened.
    target: Vec<f64>,
}

/// Precomputed network inputs and loss targets for a set of sinograms.
pub struct Objective {
    method: Method,
    geom: Arc<Geometry>,
    images: Vec<Vec<MemberData>>,
}

impl Objective {
    pub fn new(
        method: Method,
        sinograms: &[Sinogram],
        partition: &Partition,
        selection: &SubsetSelection,
        geom: &Geometry,
        filter: Filter,
    ) -> Result<Self> {
        if sinograms.is_empty() {
            return invalid("need at least one sinogram");
        }
        let mut images = Vec::with_capacity(sinograms.len());
        for y in sinograms {
            y.check_geometry(geom)?;
            let mut members = Vec::with_capacity(selection.len());
            for m in selection.members() {
                let input = network_input(y, m, partition, geom, filter)?;
                let rows = target_data(y, m)?;
                let target = match method {
                    Method::Sparse2Inverse => rows.data().to_vec(),
                    Method::Noise2Inverse => fbp(&rows, geom, filter)?.into_vec(),
                };
                members.push(MemberData { input, target_ids: m.target_angle_ids.clone(), target });
            }
            images.push(members);
        }
        Ok(Self { method, geom: Arc::new(geom.clone()), images })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    fn count(&self, range: Range<usize>) -> usize {
        self.images[range].iter().flatten().map(|m| m.target.len()).sum()
    }

    /// Loss over every image with `op` standing in for the network.
    pub fn value(&self, op: &dyn ImageOperator) -> Result<f64> {
        let mut total = 0.0;
        for m in self.images.iter().flatten() {
            let u = op.apply(&m.input)?;
            let predicted = match self.method {
                Method::Sparse2Inverse => radon(&u, &self.geom, &m.target_ids)?.data().to_vec(),
                Method::Noise2Inverse => u.into_vec(),
            };
            if predicted.len() != m.target.len() {
                return invalid("operator output does not match the target shape");
            }
            total += predicted.iter().zip(&m.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / self.count(0..self.images.len()) as f64)
    }

    /// Loss and parameter gradient over every image.
    pub fn value_and_gradient(&self, params: &NetworkParams) -> Result<(f64, Vec<Vec<f64>>)> {
        self.batch_value_and_gradient(params, 0..self.images.len())
    }

    /// Loss and parameter gradient over the images in `range`, normalised by
    /// that batch's residual count.
    pub fn batch_value_and_gradient(
        &self,
        params: &NetworkParams,
        range: Range<usize>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if range.start >= range.end || range.end > self.images.len() {
            return invalid(format!("image range {range:?} out of bounds"));
        }
        let norm = 1.0 / self.count(range.clone()) as f64;
        let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let mut total = 0.0;
        for m in self.images[range].iter().flatten() {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x = tape.constant(Tensor::from_image(&m.input));
            let u = params.forward_on(&mut tape, &vars, x)?;
            let residual = match self.method {
                Method::Sparse2Inverse => {
                    let p = tape.radon(u, &self.geom, &m.target_ids)?;
                    let shape = tape.value(p)?.shape().to_vec();
                    let t = tape.constant(Tensor::new(shape, m.target.clone())?);
                    tape.sub(p, t)?
                }
                Method::Noise2Inverse => {
                    let shape = tape.value(u)?.shape().to_vec();
                    let t = tape.constant(Tensor::new(shape, m.target.clone())?);
                    tape.sub(u, t)?
                }
            };
            let ss = tape.sum_squares(residual)?;
            let loss = tape.scale(ss, norm)?;
            tape.backward(loss)?;
            total += tape.value(loss)?.item();
            for (g, v) in grads.iter_mut().zip(&vars) {
                if let Some(d) = tape.grad(*v)? {
                    g.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok((total, grads))
    }
}

/// Mean-squared projection-domain loss of `op` on one noisy sinogram.
pub fn loss_s2i(
    op: &dyn ImageOperator,
    y: &Sinogram,
    partition: &Partition,
    selection: &SubsetSelection,
    geom: &Geometry,
    filter: Filter,
) -> Result<f64> {
    Objective::new(Method::Sparse2Inverse, std::slice::from_ref(y), partition, selection, geom, filter)?.value(op)
}

/// Mean-squared image-domain loss of `op` on one noisy sinogram.
pub fn loss_n2i(
    op: &dyn ImageOperator,
    y: &Sinogram,
    partition: &Partition,
    selection: &SubsetSelection,
    geom: &Geometry,
    filter: Filter,
) -> Result<f64> {
    Objective::new(Method::Noise2Inverse, std::slice::from_ref(y), partition, selection, geom, filter)?.value(op)
}

/// Average of the member reconstructions `op(network_input(y, I))`.
pub fn infer(
    op: &dyn ImageOperator,
    y: &Sinogram,
    partition: &Partition,
    selection: &SubsetSelection,
    geom: &Geometry,
    filter: Filter,
) -> Result<Image> {
    let mut acc = Image::zeros(geom.image_height(), geom.image_width());
    for m in selection.members() {
        let u = op.apply(&network_input(y, m, partition, geom, filter)?)?;
        acc.check_same_shape(&u)?;
        acc.data_mut().iter_mut().zip(u.data()).for_each(|(a, b)| *a += b);
    }
    let n = selection.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub learning_rate: f64,
    pub k: usize,
    pub p: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Images per optimiser step.
    pub batch: usize,
    pub filter: Filter,
    pub descriptor: Descriptor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Sparse2Inverse,
            epochs: 500,
            learning_rate: 1e-3,
            k: 4,
            p: 1,
            seed: 0,
            eval_every: 10,
            batch: 1,
            filter: Filter::RamLak,
            descriptor: Descriptor::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.p >= self.k {
            return invalid(format!("need 1 <= p < k, got p={} k={}", self.p, self.k));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.eval_every == 0 || self.batch == 0 {
            return invalid("epochs, eval_every and batch must be positive");
        }
        self.descriptor.validate()
    }
}

/// One row of the training curve. Metrics are present on evaluation epochs
/// when ground truth is available.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub per_image_ssim: Vec<f64>,
    pub per_image_psnr: Vec<f64>,
    pub seconds: f64,
}

pub const CURVE_HEADER: &str = "epoch,loss,ssim,psnr,seconds";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!("{},{:.9e},{},{},{:.3}", self.epoch, self.train_loss, opt(self.ssim), opt(self.psnr), self.seconds)
    }
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub epoch: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub params: NetworkParams,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: NetworkParams,
    /// Highest mean SSIM seen at an evaluation epoch (oracle-selected).
    pub best: Option<Snapshot>,
    pub records: Vec<MetricsRecord>,
}

/// Ground-truth images and the shared data range used for scoring.
pub struct Reference<'a> {
    pub images: &'a [Image],
    pub data_range: f64,
}

impl<'a> Reference<'a> {
    /// Uses the global max - min over all images as the data range.
    pub fn new(images: &'a [Image]) -> Result<Self> {
        if images.is_empty() {
            return invalid("reference set is empty");
        }
        let lo = images.iter().map(|i| i.min_max().0).fold(f64::INFINITY, f64::min);
        let hi = images.iter().map(|i| i.min_max().1).fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return invalid("reference images are constant");
        }
        Ok(Self { images, data_range: hi - lo })
    }

    /// Per-image (SSIM, PSNR).
    pub fn score(&self, recons: &[Image]) -> Result<(Vec<f64>, Vec<f64>)> {
        if recons.len() != self.images.len() {
            return invalid("reconstruction count does not match the reference set");
        }
        let mut s = Vec::with_capacity(recons.len());
        let mut p = Vec::with_capacity(recons.len());
        for (r, t) in recons.iter().zip(self.images) {
            s.push(ssim(r, t, Some(self.data_range))?);
            p.push(psnr(r, t, Some(self.data_range))?);
        }
        Ok((s, p))
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains a fresh network on `sinograms`, calling `observer` after every
/// epoch.
pub fn train(
    config: &TrainConfig,
    geom: &Geometry,
    sinograms: &[Sinogram],
    reference: Option<&Reference<'_>>,
    mut observer: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(r) = reference {
        if r.images.len() != sinograms.len() {
            return invalid("ground-truth count does not match the sinogram count");
        }
    }
    let partition = make_partition(geom.n_angles(), config.k)?;
    let selection = SubsetSelection::new(&partition, config.p)?;
    let objective = Objective::new(config.method, sinograms, &partition, &selection, geom, config.filter)?;
    let mut params = NetworkParams::init(config.descriptor.clone(), config.seed)?;
    let mut state = OptimState::new(&params, config.learning_rate);
    let start = Instant::now();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<Snapshot> = None;
    let n = objective.n_images();

    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for (step, lo) in (0..n).step_by(config.batch).enumerate() {
            let (loss, grads) = objective.batch_value_and_gradient(&params, lo..(lo + config.batch).min(n))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss {loss} at epoch {epoch}, step {step}")));
            }
            adam_step(&mut params, &grads, &mut state)?;
            epoch_loss += loss;
            steps += 1;
        }
        let mut record = MetricsRecord {
            epoch,
            train_loss: epoch_loss / steps as f64,
            ssim: None,
            psnr: None,
            per_image_ssim: Vec::new(),
            per_image_psnr: Vec::new(),
            seconds: 0.0,
        };
        if let Some(r) = reference {
            if epoch % config.eval_every == 0 || epoch == config.epochs {
                let recons = sinograms
                    .iter()
                    .map(|y| infer(&params, y, &partition, &selection, geom, config.filter))
                    .collect::<Result<Vec<_>>>()?;
                let (s, p) = r.score(&recons)?;
                let (ms, mp) = (mean(&s), mean(&p));
                if best.as_ref().is_none_or(|b| ms > b.ssim) {
                    best = Some(Snapshot { epoch, ssim: ms, psnr: mp, params: params.clone() });
                }
                record.ssim = Some(ms);
                record.psnr = Some(mp);
                record.per_image_ssim = s;
                record.per_image_psnr = p;
            }
        }
        record.seconds = start.elapsed().as_secs_f64();
        observer(&record);
        records.push(record);
    }
    Ok(TrainOutcome { final_params: params, best, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{apply_noise, NoiseModel};
    use crate::phantom::{generate_phantoms, PhantomSpec};
    use crate::split::make_partition;

    fn setup(size: usize, angles: usize) -> (Geometry, Image, Sinogram) {
        let g = Geometry::new(size, size, angles).unwrap();
        let x = Image::from_fn(size, size, |r, c| {
            let (dr, dc) = (r as f64 - size as f64 / 2.0, c as f64 - size as f64 / 2.0);
            if dr * dr + dc * dc < (size as f64 / 3.0).powi(2) {
                0.5 + 0.02 * (r % 3) as f64
            } else {
                0.0
            }
        });
        let y = radon(&x, &g, &g.all_angle_ids()).unwrap();
        (g, x, y)
    }

    fn zero_op(h: usize, w: usize) -> impl Fn(&Image) -> Result<Image> {
        move |_: &Image| Ok(Image::zeros(h, w))
    }

    #[test]
    fn method_parsing() {
        assert_eq!("S2I".parse::<Method>().unwrap(), Method::Sparse2Inverse);
        assert_eq!("noise2inverse".parse::<Method>().unwrap(), Method::Noise2Inverse);
        assert!("tv".parse::<Method>().is_err());
        assert_eq!(Method::Noise2Inverse.to_string(), "n2i");
    }

    #[test]
    fn zero_output_losses() {
        let (g, _, y) = setup(12, 8);
        let part = make_partition(8, 4).unwrap();
        let sel = SubsetSelection::new(&part, 1).unwrap();
        let zero = zero_op(12, 12);
        let mut s2i = 0.0;
        let mut n2i = 0.0;
        let mut n_s = 0;
        let mut n_n = 0;
        for m in sel.members() {
            let t = target_data(&y, m).unwrap();
            s2i += t.data().iter().map(|v| v * v).sum::<f64>();
            n_s += t.data().len();
            let b = fbp(&t, &g, Filter::RamLak).unwrap();
            n2i += b.data().iter().map(|v| v * v).sum::<f64>();
            n_n += b.data().len();
        }
        let got = loss_s2i(&zero, &y, &part, &sel, &g, Filter::RamLak).unwrap();
        assert!((got - s2i / n_s as f64).abs() <= 1e-12 * got);
        let got = loss_n2i(&zero, &y, &part, &sel, &g, Filter::RamLak).unwrap();
        assert!((got - n2i / n_n as f64).abs() <= 1e-12 * got);
    }

    #[test]
    fn frozen_oracles_give_zero_loss() {
        let (g, x, y) = setup(12, 8);
        let part = make_partition(8, 4).unwrap();
        let sel = SubsetSelection::new(&part, 1).unwrap();
        let truth = |_: &Image| Ok(x.clone());
        assert!(loss_s2i(&truth, &y, &part, &sel, &g, Filter::RamLak).unwrap() < 1e-28);
        // n2i: an operator that returns the complement FBP of whichever member it sees.
        let targets: Vec<(Image, Image)> = sel
            .members()
            .iter()
            .map(|m| {
                let input = network_input(&y, m, &part, &g, Filter::RamLak).unwrap();
                let target = fbp(&target_data(&y, m).unwrap(), &g, Filter::RamLak).unwrap();
                (input, target)
            })
            .collect();
        let oracle = |u: &Image| Ok(targets.iter().find(|(i, _)| i == u).unwrap().1.clone());
        assert_eq!(loss_n2i(&oracle, &y, &part, &sel, &g, Filter::RamLak).unwrap(), 0.0);
    }

    #[test]
    fn infer_averages_members() {
        let (g, _, y) = setup(12, 8);
        let part = make_partition(8, 2).unwrap();
        let sel = SubsetSelection::new(&part, 1).unwrap();
        let constant = |_: &Image| Ok(Image::from_fn(12, 12, |_, _| 0.25));
        let out = infer(&constant, &y, &part, &sel, &g, Filter::RamLak).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));

        let part = make_partition(8, 4).unwrap();
        let sel = SubsetSelection::new(&part, 1).unwrap();
        let net = NetworkParams::init(Descriptor { widths: vec![4, 8], ..Descriptor::default() }, 3).unwrap();
        let out = infer(&net, &y, &part, &sel, &g, Filter::RamLak).unwrap();
        let mut expect = vec![0.0; 144];
        for m in sel.members() {
            let u = net.forward(&network_input(&y, m, &part, &g, Filter::RamLak).unwrap()).unwrap();
            expect.iter_mut().zip(u.data()).for_each(|(a, b)| *a += b / 4.0);
        }
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_value() {
        let (g, _, y) = setup(8, 8);
        let part = make_partition(8, 4).unwrap();
        let sel = SubsetSelection::new(&part, 1).unwrap();
        let net = NetworkParams::init(Descriptor { widths: vec![3], ..Descriptor::default() }, 9).unwrap();
        for method in [Method::Sparse2Inverse, Method::Noise2Inverse] {
            let obj = Objective::new(method, std::slice::from_ref(&y), &part, &sel, &g, Filter::RamLak).unwrap();
            let (v, grads) = obj.value_and_gradient(&net).unwrap();
            assert!((v - obj.value(&net).unwrap()).abs() < 1e-12 * v.max(1e-300));
            let h = 1e-5;
            for (ti, gi) in grads.iter().enumerate() {
                let e = gi.len() / 2;
                let eval = |d: f64| {
                    let mut p = net.clone();
                    p.tensors_mut()[ti].1.data_mut()[e] += d;
                    obj.value(&p).unwrap()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (numeric - gi[e]).abs() / numeric.abs().max(gi[e].abs()).max(1e-8);
                assert!(err < 1e-4, "{method} tensor {ti}: {} vs {numeric}", gi[e]);
            }
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { p: 4, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        let (g, _, y) = setup(8, 8);
        assert!(train(&ok, &g, &[], None, |_| {}).is_err());
        let truth = [Image::zeros(8, 8), Image::zeros(8, 8)];
        let _ = y;
        assert!(Reference::new(&truth).is_err());
    }

    #[test]
    fn short_run_is_deterministic_and_learns() {
        let spec = PhantomSpec { size: 32, ..PhantomSpec::default() };
        let x = generate_phantoms(&spec, 1).unwrap();
        let g = Geometry::new(32, 32, 16).unwrap();
        let clean = radon(&x[0], &g, &g.all_angle_ids()).unwrap();
        let y = apply_noise(&clean, &NoiseModel::new(1000.0, 5)).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            eval_every: 2,
            learning_rate: 1e-3,
            descriptor: Descriptor { widths: vec![4, 8], ..Descriptor::default() },
            ..TrainConfig::default()
        };
        let reference = Reference::new(&x).unwrap();
        let mut seen = 0;
        let a = train(&cfg, &g, std::slice::from_ref(&y), Some(&reference), |_| seen += 1).unwrap();
        let b = train(&cfg, &g, &[y], Some(&reference), |_| {}).unwrap();
        assert_eq!(seen, 5);
        assert_eq!(a.final_params, b.final_params);
        let strip = |r: &MetricsRecord| (r.epoch, r.train_loss, r.ssim, r.psnr);
        assert_eq!(a.records.iter().map(strip).collect::<Vec<_>>(), b.records.iter().map(strip).collect::<Vec<_>>());
        let evaluated: Vec<usize> = a.records.iter().filter(|r| r.ssim.is_some()).map(|r| r.epoch).collect();
        assert_eq!(evaluated, vec![2, 4, 5]);
        assert!(a.records[4].train_loss < a.records[0].train_loss);
        let best = a.best.unwrap();
        assert!(evaluated.contains(&best.epoch));
        assert!(a.records[0].csv_row().starts_with("1,"));
    }
}
