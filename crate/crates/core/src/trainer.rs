//! Optimisation loop, checkpoints and the ablation switchboard.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::dataset::{Dataset, Sample};
use crate::decoder::PeMode;
use crate::error::{Error, Result};
use crate::eval::{hico_map, ClassSplit, EvalRecord, GtPair, HicoSetting, MapResult};
use crate::model::Model;
use crate::model::ModelConfig;
use crate::numcore::layers::Init;
use crate::numcore::{read_checkpoint, write_checkpoint, Gradients, Graph, ParamStore, SeededRng, Tensor};
use crate::objective::ActionTable;

const OPT_M: &str = "__opt.m/";
const OPT_V: &str = "__opt.v/";
const OPT_STEP: &str = "__opt.step";
const PROGRESS: &str = "__train.progress";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epoch (0-based) from which the learning rate is divided by `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub init_std: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 30,
            lr_drop_epoch: 20,
            lr_drop_factor: 5.0,
            batch_size: 8,
            seed: 0,
            init_std: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad("lr_drop_factor must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr / self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// First and second moment estimates for decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One update. Weights shrink by `1 - lr * wd` first, then take the
    /// bias-corrected moment step. Parameters without a gradient are treated
    /// as having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - cfg.beta1.powf(t);
        let c2 = 1.0 - cfg.beta2.powf(t);
        let shrink = 1.0 - lr * cfg.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                w[k] *= shrink;
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Position in the schedule: the next batch to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Diagnostic written when a loss or gradient goes non-finite.
#[derive(Clone, Debug, Serialize)]
pub struct NanDump {
    pub epoch: usize,
    pub step: u64,
    pub image_ids: Vec<String>,
    pub losses: Vec<f64>,
    pub non_finite_grads: Vec<String>,
    pub non_finite_params: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub progress: Progress,
    /// Filled when training aborts on a non-finite value.
    pub last_dump: Option<NanDump>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(cfg.seed);
        let model = Model::new(&mut store, model_cfg, &mut Init { rng: &mut rng, std: cfg.init_std })?;
        let opt = OptimizerState::new(&store);
        Ok(Self { model, store, opt, cfg: cfg.clone(), progress: Progress::default(), last_dump: None })
    }

    pub fn finished(&self) -> bool {
        self.progress.epoch >= self.cfg.epochs
    }

    /// Image order of an epoch; a pure function of the seed and epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::with_stream(self.cfg.seed, (1 << 40) + epoch as u64).shuffle(&mut order);
        order
    }

    fn n_batches(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// Summed gradients and per-image losses of a batch.
    pub fn batch_gradients(&self, batch: &[&Sample], table: &ActionTable) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = Gradients::new(self.store.len());
        let mut losses = Vec::with_capacity(batch.len());
        for s in batch {
            let mut g = Graph::new();
            let pass = self.model.loss(&mut g, &self.store, s, table).and_then(|l| match l {
                Some(l) if g.value(l).item().is_finite() => Ok((g.value(l).item(), Some(g.backward(l)?))),
                Some(l) => Ok((g.value(l).item(), None)),
                None => Ok((0.0, None)),
            });
            match pass {
                Ok((v, gr)) => {
                    losses.push(v);
                    if let Some(gr) = gr {
                        grads.add_assign(&gr);
                    }
                }
                Err(Error::NonFinite(_)) => losses.push(f64::NAN),
                Err(e) => return Err(e),
            }
        }
        Ok((grads, losses))
    }

    /// Runs the next batch of the schedule. Returns the mean batch loss, or
    /// `None` once every epoch has run.
    pub fn step(&mut self, train: &[Sample], table: &ActionTable) -> Result<Option<f64>> {
        if self.finished() || train.is_empty() {
            return Ok(None);
        }
        let order = self.epoch_order(train.len(), self.progress.epoch);
        let bs = self.cfg.batch_size;
        let idx = &order[self.progress.batch * bs..((self.progress.batch + 1) * bs).min(train.len())];
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let (grads, losses) = self.batch_gradients(&batch, table)?;
        if !losses.iter().all(|l| l.is_finite()) || !grads.is_finite() {
            let dump = NanDump {
                epoch: self.progress.epoch,
                step: self.opt.step,
                image_ids: batch.iter().map(|s| s.image_id().to_string()).collect(),
                losses: losses.clone(),
                non_finite_grads: grads.iter().filter(|(_, g)| !g.is_finite()).map(|(id, _)| self.store.name(id).to_string()).collect(),
                non_finite_params: self.store.iter().filter(|(_, p)| !p.value.is_finite()).map(|(_, p)| p.name.clone()).collect(),
            };
            self.last_dump = Some(dump);
            return Err(Error::Diverged(format!(
                "non-finite loss or gradient at epoch {} step {}",
                self.progress.epoch, self.opt.step
            )));
        }
        let lr = self.cfg.lr_at(self.progress.epoch);
        self.opt.update(&mut self.store, &grads, lr, &self.cfg);
        self.progress.batch += 1;
        if self.progress.batch >= self.n_batches(train.len()) {
            self.progress = Progress { epoch: self.progress.epoch + 1, batch: 0 };
        }
        Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
    }

    /// Runs the remainder of the current epoch. `None` once every epoch has run.
    pub fn run_epoch(&mut self, train: &[Sample], table: &ActionTable) -> Result<Option<EpochLog>> {
        let epoch = self.progress.epoch;
        let mut sum = 0.0;
        let mut count = 0usize;
        while self.progress.epoch == epoch {
            let Some(loss) = self.step(train, table)? else { return Ok(None) };
            sum += loss;
            count += 1;
        }
        Ok(Some(EpochLog { epoch, step: self.opt.step, loss: sum / count as f64, lr: self.cfg.lr_at(epoch) }))
    }

    /// Trains until the schedule is exhausted, calling `on_epoch` after each epoch.
    pub fn train(&mut self, train: &[Sample], table: &ActionTable, mut on_epoch: impl FnMut(&EpochLog) -> Result<()>) -> Result<()> {
        while let Some(log) = self.run_epoch(train, table)? {
            on_epoch(&log)?;
        }
        Ok(())
    }

    /// Parameters followed by optimizer state and schedule position.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (id, p) in self.store.iter() {
            entries.push((p.name.clone(), p.value.clone()));
            entries.push((format!("{OPT_M}{}", p.name), self.opt.m[id.index()].clone()));
            entries.push((format!("{OPT_V}{}", p.name), self.opt.v[id.index()].clone()));
        }
        entries.push((OPT_STEP.into(), Tensor::new(vec![1], vec![self.opt.step as f64])?));
        let progress = vec![self.progress.epoch as f64, self.progress.batch as f64];
        entries.push((PROGRESS.into(), Tensor::new(vec![2], progress)?));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, entries.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(buf)
    }

    /// Rebuilds a trainer from checkpoint bytes; the model and train configs
    /// must match the ones the checkpoint was written with.
    pub fn from_checkpoint(bytes: &[u8], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let mut t = Self::new(model_cfg, cfg)?;
        let mut seen = vec![false; t.store.len()];
        for (name, value) in read_checkpoint(bytes)? {
            if let Some(rest) = name.strip_prefix(OPT_M) {
                let id = t.store.id(rest).ok_or_else(|| Error::Incompatible(format!("moment for unknown `{rest}`")))?;
                check_shape(&name, &t.opt.m[id.index()], &value)?;
                t.opt.m[id.index()] = value;
            } else if let Some(rest) = name.strip_prefix(OPT_V) {
                let id = t.store.id(rest).ok_or_else(|| Error::Incompatible(format!("moment for unknown `{rest}`")))?;
                check_shape(&name, &t.opt.v[id.index()], &value)?;
                t.opt.v[id.index()] = value;
            } else if name == OPT_STEP {
                t.opt.step = value.data()[0] as u64;
            } else if name == PROGRESS {
                t.progress = Progress { epoch: value.data()[0] as usize, batch: value.data()[1] as usize };
            } else {
                let id = t.store.id(&name).ok_or_else(|| Error::Incompatible(format!("unexpected parameter `{name}`")))?;
                t.store.set(&name, value)?;
                seen[id.index()] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = t.store.iter().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
            return Err(Error::Incompatible(format!("checkpoint lacks `{name}`")));
        }
        Ok(t)
    }
}

fn check_shape(name: &str, have: &Tensor, got: &Tensor) -> Result<()> {
    if have.shape() != got.shape() {
        return Err(Error::Incompatible(format!("`{name}` has shape {:?}, checkpoint has {:?}", have.shape(), got.shape())));
    }
    Ok(())
}

/// Loads only the model parameters from a checkpoint.
pub fn load_model(bytes: &[u8], model_cfg: &ModelConfig) -> Result<(Model, ParamStore)> {
    let t = Trainer::from_checkpoint(bytes, model_cfg, &TrainConfig::default())?;
    Ok((t.model, t.store))
}

/// Scores every test image; records of all unmasked actions of every pair.
pub fn infer(model: &Model, store: &ParamStore, samples: &[Sample], table: &ActionTable) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(model.infer_sample(store, s, table)?);
    }
    Ok(out)
}

pub fn write_metrics<W: Write>(mut w: W, log: &EpochLog) -> Result<()> {
    serde_json::to_writer(&mut w, log)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Model variants of the decoder and positional-embedding ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// No decoder: pair queries go straight to the classifier.
    A,
    /// Feed-forward only.
    B,
    /// Pair self-attention and feed-forward.
    C,
    /// Full layer with cross-attention on the raw feature map.
    E,
    /// Feature head, one layer, no positional embedding in cross-attention.
    J2,
    /// As J2 with additive box-pair embedding.
    K1,
    /// As J2 with concatenated box-pair embedding.
    K2,
    /// As J2 with concatenated, modulated box-pair embedding.
    K3,
    /// K3 with two decoder layers.
    L1,
}

impl Variant {
    pub const ALL: [Variant; 9] =
        [Variant::A, Variant::B, Variant::C, Variant::E, Variant::J2, Variant::K1, Variant::K2, Variant::K3, Variant::L1];

    pub fn apply(self, cfg: &mut ModelConfig) {
        let d = &mut cfg.decoder;
        let (layers, sa, ca, ffn, head, pe) = match self {
            Variant::A => (0, false, false, false, false, PeMode::None),
            Variant::B => (1, false, false, true, false, PeMode::None),
            Variant::C => (1, true, false, true, false, PeMode::None),
            Variant::E => (1, true, true, true, false, PeMode::ConcatModulated),
            Variant::J2 => (1, true, true, true, true, PeMode::None),
            Variant::K1 => (1, true, true, true, true, PeMode::Additive),
            Variant::K2 => (1, true, true, true, true, PeMode::Concat),
            Variant::K3 => (1, true, true, true, true, PeMode::ConcatModulated),
            Variant::L1 => (2, true, true, true, true, PeMode::ConcatModulated),
        };
        d.n_layers = layers;
        d.self_attn = sa;
        d.cross_attn = ca;
        d.ffn = ffn;
        d.feature_head = head;
        d.pe_mode = pe;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Table2,
    Table4,
}

impl Suite {
    pub fn variants(self) -> &'static [Variant] {
        match self {
            Suite::Table2 => &[Variant::A, Variant::B, Variant::C, Variant::E],
            Suite::Table4 => &[Variant::J2, Variant::K1, Variant::K2, Variant::K3, Variant::L1],
        }
    }

    /// Orderings the suite is expected to show, as `(worse, better)`.
    pub fn expected_orderings(self) -> &'static [(Variant, Variant)] {
        match self {
            Suite::Table2 => &[(Variant::A, Variant::E)],
            Suite::Table4 => &[(Variant::K1, Variant::K2), (Variant::K2, Variant::K3)],
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(Suite::Table2),
            "table4" => Ok(Suite::Table4),
            _ => Err(Error::Invalid(format!("unknown suite `{s}`, expected table2 or table4"))),
        }
    }
}

/// Mean AP over the interaction classes whose action is in `actions`.
pub fn subset_ap(map: &MapResult, table: &ActionTable, actions: &[usize]) -> Option<f64> {
    let ids = table.interactions();
    let v: Vec<f64> = map.per_class.iter().filter(|(c, _)| actions.contains(&ids[**c].1)).map(|(_, ap)| *ap).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Expected mAP of the same records under uniformly random scores, averaged
/// over `draws` random rankings.
pub fn chance_map(
    records: &[EvalRecord],
    gts: &[GtPair],
    table: &ActionTable,
    split: &ClassSplit,
    seed: u64,
    draws: usize,
) -> Result<MapResult> {
    let mut rng = SeededRng::new(seed);
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    let mut recs = records.to_vec();
    for _ in 0..draws.max(1) {
        for r in recs.iter_mut() {
            r.score = rng.uniform();
        }
        let m = hico_map(&recs, gts, table, split, HicoSetting::Default)?;
        for (c, ap) in m.per_class {
            *acc.entry(c).or_default() += ap / draws.max(1) as f64;
        }
    }
    let mean = |it: Vec<f64>| (!it.is_empty()).then(|| it.iter().sum::<f64>() / it.len() as f64);
    Ok(MapResult {
        full: mean(acc.values().copied().collect()).unwrap_or(0.0),
        rare: mean(acc.iter().filter(|(c, _)| split.is_rare(**c)).map(|(_, v)| *v).collect()),
        non_rare: mean(acc.iter().filter(|(c, _)| !split.is_rare(**c)).map(|(_, v)| *v).collect()),
        per_class: acc,
    })
}

/// One trained and evaluated variant.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub map: MapResult,
    pub records: Vec<EvalRecord>,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Trains and evaluates one variant on `ds`.
pub fn run_variant(variant: Variant, base: &ModelConfig, train_cfg: &TrainConfig, ds: &Dataset) -> Result<(Trainer, RunResult)> {
    let mut cfg = base.clone();
    variant.apply(&mut cfg);
    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg, train_cfg)?;
    let mut final_loss = f64::NAN;
    trainer.train(&ds.train, &ds.table, |log| {
        final_loss = log.loss;
        Ok(())
    })?;
    let records = infer(&trainer.model, &trainer.store, &ds.test, &ds.table)?;
    let gts: Vec<GtPair> = ds.test.iter().flat_map(|s| s.gt.iter().cloned()).collect();
    let map = hico_map(&records, &gts, &ds.table, &ds.split, HicoSetting::Default)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok((trainer, RunResult { variant, seed: train_cfg.seed, map, records, final_loss, seconds }))
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub suite: Suite,
    pub runs: Vec<RunResult>,
}

impl AblationTable {
    /// Mean full, rare and non-rare mAP of a variant over its seeds.
    pub fn mean(&self, v: Variant) -> Option<(f64, f64, f64)> {
        let rows: Vec<&RunResult> = self.runs.iter().filter(|r| r.variant == v).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let f = |get: &dyn Fn(&MapResult) -> f64| rows.iter().map(|r| get(&r.map)).sum::<f64>() / n;
        Some((f(&|m| m.full), f(&|m| m.rare.unwrap_or(f64::NAN)), f(&|m| m.non_rare.unwrap_or(f64::NAN))))
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<8}{:>8}{:>10}{:>10}{:>10}\n", "variant", "seeds", "full", "rare", "non-rare");
        for &v in self.suite.variants() {
            if let Some((full, rare, nr)) = self.mean(v) {
                let n = self.runs.iter().filter(|r| r.variant == v).count();
                s += &format!("{:<8}{:>8}{:>10.2}{:>10.2}{:>10.2}\n", v.to_string(), n, full, rare, nr);
            }
        }
        for &(lo, hi) in self.suite.expected_orderings() {
            if let (Some(a), Some(b)) = (self.mean(lo), self.mean(hi)) {
                let held = if b.0 > a.0 { "holds" } else { "does not hold" };
                s += &format!("ordering {lo} < {hi}: {held} ({:.2} vs {:.2})\n", a.0, b.0);
            }
        }
        s
    }
}

/// Trains every variant of `suite` once per seed on the same data and
/// evaluates each on the test split.
pub fn run_ablation(
    suite: Suite,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    seeds: &[u64],
    mut on_run: impl FnMut(&RunResult),
) -> Result<AblationTable> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for &v in suite.variants() {
            let cfg = TrainConfig { seed, ..train_cfg.clone() };
            let (_, r) = run_variant(v, base, &cfg, ds)?;
            on_run(&r);
            runs.push(r);
        }
    }
    Ok(AblationTable { suite, runs })
}
