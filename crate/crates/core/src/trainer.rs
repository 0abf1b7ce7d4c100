//! Two-stage training orchestration. Stage 1 trains the text-conditioned
//! teacher on degraded/guidance pairs; stage 2 freezes the teacher and
//! distills it into the text-free student through the three-part
//! distillation objective. Also home to the checkpoint container and the
//! fusion inference entry point.
//!
//! Reproducibility contract: a fixed seed gives identical checkpoints on
//! the same machine and backend. Cross-backend nondeterminism of parallel
//! reductions is out of contract.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Manifest, SamplePair};
use crate::error::{Error, Result};
use crate::imgmath::Image;
use crate::losses::{self, DownProjector, LossWeights};
use crate::net::{self, FusionNet, NetConfig};
use crate::ops;
use crate::textprior::{resolve_weights, EmbeddingProvider, WeightTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Distill,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Teacher => write!(f, "teacher"),
            Stage::Distill => write!(f, "distill"),
        }
    }
}

/// AdamW settings plus the cosine schedule and gradient clipping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Cosine decay floor as a fraction of the base learning rate.
    pub lr_final_frac: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            lr_final_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub net: NetConfig,
    pub optim: OptimSettings,
    pub batch_size: usize,
    pub steps: u64,
    pub patch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub weight_table: WeightTable,
    /// 0 = only the final checkpoint.
    pub ckpt_every: u64,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn teacher(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            stage: Stage::Teacher,
            net: NetConfig::teacher(),
            optim: OptimSettings::default(),
            batch_size: 2,
            steps: 200,
            patch: 128,
            seed: 0,
            weights: LossWeights::default(),
            weight_table: WeightTable::default(),
            ckpt_every: 0,
            out_dir: out_dir.into(),
        }
    }

    pub fn distill(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            stage: Stage::Distill,
            net: NetConfig::student(),
            ..Self::teacher(out_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.patch == 0 {
            return Err(Error::InvalidConfig("patch must be >= 1".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad learning rate {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::InvalidConfig("betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha12Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    fn word_pos(&self) -> u128 {
        ((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128
    }
}

/// In-memory checkpoint: metadata plus named f32 tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub net: NetConfig,
    pub rng: RngState,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    stage: Stage,
    step: u64,
    net: NetConfig,
    rng: RngState,
}

pub const CKPT_MAGIC: &[u8; 4] = b"DTPF";
pub const CKPT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

impl Checkpoint {
    fn from_varmap(
        stage: Stage,
        step: u64,
        net: &NetConfig,
        rng: RngState,
        varmap: &VarMap,
    ) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var) in varmap.data().lock().unwrap().iter() {
            tensors.insert(name.clone(), var.as_tensor().detach().copy()?);
        }
        Ok(Self {
            stage,
            step,
            net: net.clone(),
            rng,
            tensors,
        })
    }

    /// SHA-256 over the sorted tensor names and payloads; used to verify the
    /// frozen-teacher invariant.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    }
}

/// Container layout: magic `DTPF`, u32 version, length-prefixed UTF-8 JSON
/// metadata (stage, step, net config, RNG state), then per tensor:
/// u32 name length, name, u8 dtype code (0 = f32), u8 rank, rank u32 dims,
/// little-endian f32 payload.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&CKPT_VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(&CheckpointMeta {
        stage: ckpt.stage,
        step: ckpt.step,
        net: ckpt.net.clone(),
        rng: ckpt.rng,
    })?;
    f.write_all(&(meta.len() as u32).to_le_bytes())?;
    f.write_all(&meta)?;
    for (name, t) in &ckpt.tensors {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u32).to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&[DTYPE_F32])?;
        let dims = t.dims();
        f.write_all(&[dims.len() as u8])?;
        for &d in dims {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.flatten_all()?.to_vec1::<f32>()? {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32_le()?;
    if version != CKPT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = r.u32_le()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let mut tensors = BTreeMap::new();
    let dev = Device::Cpu;
    while !r.done() {
        let name_len = r.u32_le()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::InvalidConfig(format!("bad tensor name: {e}")))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnknownDtype(dtype));
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32_le()? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n * 4)?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, Tensor::from_vec(values, dims, &dev)?);
    }
    Ok(Checkpoint {
        stage: meta.stage,
        step: meta.step,
        net: meta.net,
        rng: meta.rng,
        tensors,
    })
}

/// Outcome of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub ckpt_path: PathBuf,
    pub log_path: PathBuf,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Reshuffling index iterator over the sample set.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha12Rng,
}

impl Batcher {
    fn new(n: usize, rng: ChaCha12Rng) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: 0,
            rng,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        // Fisher-Yates with the owned stream; stable across platforms.
        for i in (1..self.order.len()).rev() {
            let j = self.rng.random_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.pos >= self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn preload(manifest: &Manifest) -> Result<Vec<SamplePair>> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyDataset(PathBuf::from("<manifest>")));
    }
    manifest.records.iter().map(data::load_pair).collect()
}

fn embedding_tensor(
    provider: &dyn EmbeddingProvider,
    category: &str,
    text_dim: usize,
    dev: &Device,
) -> Result<Tensor> {
    let emb = provider.embed(category)?;
    if emb.vector.len() != text_dim {
        return Err(Error::EmbeddingDim {
            expected: text_dim,
            got: emb.vector.len(),
            entry: category.to_string(),
        });
    }
    Ok(Tensor::from_vec(emb.vector, (1, text_dim), dev)?)
}

fn batch_images(
    patches: &[SamplePair],
    pick: impl Fn(&SamplePair) -> &Image,
    dev: &Device,
) -> Result<Tensor> {
    let imgs: Vec<Image> = patches.iter().map(|p| pick(p).clone()).collect();
    ops::batch_to_tensor(&imgs, dev, DType::F32)
}

fn cosine_lr(o: &OptimSettings, step: u64, total: u64) -> f64 {
    if total == 0 {
        return o.lr;
    }
    let floor = o.lr * o.lr_final_frac;
    let t = step as f64 / total as f64;
    floor + (o.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<()> {
    let mut total = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v) {
            total += g
                .sqr()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_vec0::<f64>()?;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for v in vars {
            let scaled = match grads.get(v) {
                Some(g) => (g * scale)?,
                None => continue,
            };
            grads.insert(v, scaled);
        }
    }
    Ok(())
}

struct TrainLog {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl TrainLog {
    fn create(path: PathBuf) -> Result<Self> {
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record([
            "step", "stage", "l_int", "l_ssim", "l_grad", "l_color", "l_feat", "l_res", "total",
            "lr",
        ])?;
        Ok(Self { writer, path })
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &mut self,
        step: u64,
        stage: Stage,
        parts: [f64; 6],
        total: f64,
        lr: f64,
    ) -> Result<()> {
        let mut rec = vec![step.to_string(), stage.to_string()];
        rec.extend(parts.iter().map(|v| format!("{v:.8}")));
        rec.push(format!("{total:.8}"));
        rec.push(format!("{lr:.8}"));
        self.writer.write_record(&rec)?;
        self.writer.flush()?;
        Ok(())
    }
}

fn restore_from_checkpoint(varmap: &VarMap, ckpt: &Checkpoint) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    for (name, var) in data.iter() {
        let t = ckpt
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if t.dims() != var.dims() {
            return Err(Error::TensorShape {
                name: name.clone(),
                expected: var.dims().to_vec(),
                got: t.dims().to_vec(),
            });
        }
        var.set(t)?;
    }
    Ok(())
}

/// Stage 1: trains the text-conditioned teacher with per-category loss
/// weights. Aborts with a diagnostic when the loss turns non-finite.
pub fn train_teacher(
    cfg: &TrainConfig,
    manifest: &Manifest,
    provider: &dyn EmbeddingProvider,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Teacher || !cfg.net.with_text {
        return Err(Error::InvalidConfig(
            "teacher training needs stage=teacher and net.with_text=true".into(),
        ));
    }
    let dev = Device::Cpu;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &dev);
    let model = FusionNet::new(&cfg.net, vb.pp("net"))?;
    net::deterministic_init(&varmap, cfg.seed)?;

    let mut rng = ChaCha12Rng::seed_from_u64(data::mix_seed(cfg.seed, &[0x0bae]));
    let mut start_step = 0u64;
    if let Some(ckpt) = resume {
        if ckpt.stage != Stage::Teacher {
            return Err(Error::StageMismatch {
                expected: "teacher",
                found: ckpt.stage.to_string(),
            });
        }
        if ckpt.net != cfg.net {
            return Err(Error::InvalidConfig(
                "resume checkpoint was produced by a different net config".into(),
            ));
        }
        restore_from_checkpoint(&varmap, ckpt)?;
        rng.set_word_pos(ckpt.rng.word_pos());
        start_step = ckpt.step;
    }

    let samples = preload(manifest)?;
    let mut embeddings: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut resolved: BTreeMap<String, LossWeights> = BTreeMap::new();
    for pair in &samples {
        if !embeddings.contains_key(&pair.category) {
            embeddings.insert(
                pair.category.clone(),
                embedding_tensor(provider, &pair.category, cfg.net.text_dim, &dev)?,
            );
            let w = resolve_weights(&pair.category, &cfg.weights, &cfg.weight_table);
            w.validate()?;
            resolved.insert(pair.category.clone(), w);
        }
    }

    let vars = varmap.all_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.optim.lr,
            beta1: cfg.optim.beta1,
            beta2: cfg.optim.beta2,
            eps: 1e-8,
            weight_decay: cfg.optim.weight_decay,
        },
    )?;

    let mut log = TrainLog::create(cfg.out_dir.join("teacher_log.csv"))?;
    let mut batcher = Batcher::new(samples.len(), rng);
    let mut initial_loss = None;
    let mut final_loss = None;

    for step in start_step..cfg.steps {
        let lr = cosine_lr(&cfg.optim, step, cfg.steps);
        opt.set_learning_rate(lr);

        let idxs = batcher.next(cfg.batch_size);
        let patches: Vec<SamplePair> = idxs
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                data::sample_patch(
                    &samples[i],
                    cfg.patch,
                    data::mix_seed(cfg.seed, &[1, step, slot as u64]),
                )
            })
            .collect();
        let vis = batch_images(&patches, |p| &p.vis, &dev)?;
        let ir = batch_images(&patches, |p| &p.ir, &dev)?;
        let gvis = batch_images(&patches, |p| &p.vis_guid, &dev)?;
        let gir = batch_images(&patches, |p| &p.ir_guid, &dev)?;
        let text_rows: Vec<Tensor> = patches
            .iter()
            .map(|p| embeddings[&p.category].clone())
            .collect();
        let text = Tensor::cat(&text_rows, 0)?;

        let (fused, _pyr) = model.forward(&vis, &ir, Some(&text))?;

        // Group rows by category so each sub-batch gets its resolved weights.
        let mut groups: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for (row, p) in patches.iter().enumerate() {
            groups.entry(p.category.as_str()).or_default().push(row as u32);
        }
        let b = patches.len() as f64;
        let mut total: Option<Tensor> = None;
        let mut total_value = 0.0f64;
        let mut parts = [0.0f64; 6];
        for (cat, rows) in &groups {
            let frac = rows.len() as f64 / b;
            let w = &resolved[*cat];
            let (f_g, gv_g, gi_g) = if groups.len() == 1 {
                (fused.clone(), gvis.clone(), gir.clone())
            } else {
                let idx = Tensor::from_vec(rows.clone(), rows.len(), &dev)?;
                (
                    fused.index_select(&idx, 0)?,
                    gvis.index_select(&idx, 0)?,
                    gir.index_select(&idx, 0)?,
                )
            };
            let loss = losses::teacher_loss(&f_g, &gv_g, &gi_g, w)?;
            total = Some(match total {
                None => (loss.total * frac)?,
                Some(acc) => (acc + (loss.total * frac)?)?,
            });
            total_value += frac * loss.breakdown.total;
            parts[0] += frac * loss.breakdown.l_int;
            parts[1] += frac * loss.breakdown.l_ssim;
            parts[2] += frac * loss.breakdown.l_grad;
            parts[3] += frac * loss.breakdown.l_color;
        }
        let total = total.expect("at least one group");

        if !total_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch_ids: patches.iter().map(|p| p.id.clone()).collect(),
            });
        }
        if initial_loss.is_none() {
            initial_loss = Some(total_value);
        }
        final_loss = Some(total_value);

        let mut grads = total.backward()?;
        clip_gradients(&mut grads, &vars, cfg.optim.clip_norm)?;
        opt.step(&grads)?;

        log.row(step, Stage::Teacher, parts, total_value, lr)?;

        if cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 && step + 1 < cfg.steps {
            let ckpt = Checkpoint::from_varmap(
                Stage::Teacher,
                step + 1,
                &cfg.net,
                RngState::capture(cfg.seed, &batcher.rng),
                &varmap,
            )?;
            save_checkpoint(&ckpt, &cfg.out_dir.join(format!("teacher_step{}.ckpt", step + 1)))?;
        }
    }

    let checkpoint = Checkpoint::from_varmap(
        Stage::Teacher,
        cfg.steps,
        &cfg.net,
        RngState::capture(cfg.seed, &batcher.rng),
        &varmap,
    )?;
    let ckpt_path = cfg.out_dir.join("teacher.ckpt");
    save_checkpoint(&checkpoint, &ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint,
        ckpt_path,
        log_path: log.path.clone(),
        initial_loss,
        final_loss,
    })
}

/// Stage 2: freezes the teacher and trains the student plus the feature
/// projector under the distillation objective. The base fusion term uses
/// the fixed default weights rather than text-resolved ones.
pub fn distill_student(
    cfg: &TrainConfig,
    teacher_ckpt: &Checkpoint,
    manifest: &Manifest,
    provider: &dyn EmbeddingProvider,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != Stage::Distill || cfg.net.with_text {
        return Err(Error::InvalidConfig(
            "distillation needs stage=distill and net.with_text=false".into(),
        ));
    }
    if teacher_ckpt.stage != Stage::Teacher {
        return Err(Error::StageMismatch {
            expected: "teacher",
            found: teacher_ckpt.stage.to_string(),
        });
    }
    if !teacher_ckpt.net.with_text {
        return Err(Error::InvalidConfig(
            "teacher checkpoint is not text-conditioned".into(),
        ));
    }
    if teacher_ckpt.net.window != cfg.net.window || teacher_ckpt.net.levels != cfg.net.levels {
        return Err(Error::InvalidConfig(format!(
            "teacher/student level geometry mismatch: window {} vs {}, levels {} vs {}",
            teacher_ckpt.net.window, cfg.net.window, teacher_ckpt.net.levels, cfg.net.levels
        )));
    }
    let dev = Device::Cpu;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let teacher = FusionNet::from_tensors(&teacher_ckpt.net, &teacher_ckpt.tensors, "net", &dev)?;

    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &dev);
    let student = FusionNet::new(&cfg.net, vb.pp("net"))?;
    let teacher_ch: Vec<usize> = (0..cfg.net.levels).map(|l| teacher_ckpt.net.channels(l)).collect();
    let student_ch: Vec<usize> = (0..cfg.net.levels).map(|l| cfg.net.channels(l)).collect();
    let proj = DownProjector::new(&teacher_ch, &student_ch, vb.pp("proj"))?;
    net::deterministic_init(&varmap, cfg.seed)?;

    let samples = preload(manifest)?;
    let mut embeddings: BTreeMap<String, Tensor> = BTreeMap::new();
    for pair in &samples {
        if !embeddings.contains_key(&pair.category) {
            embeddings.insert(
                pair.category.clone(),
                embedding_tensor(provider, &pair.category, teacher_ckpt.net.text_dim, &dev)?,
            );
        }
    }

    // Base fusion term with fixed weights.
    let fixed = LossWeights {
        alpha: cfg.weights.alpha,
        ..LossWeights::default()
    };
    let alpha = cfg.weights.alpha;

    let vars = varmap.all_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.optim.lr,
            beta1: cfg.optim.beta1,
            beta2: cfg.optim.beta2,
            eps: 1e-8,
            weight_decay: cfg.optim.weight_decay,
        },
    )?;

    let mut log = TrainLog::create(cfg.out_dir.join("distill_log.csv"))?;
    let rng = ChaCha12Rng::seed_from_u64(data::mix_seed(cfg.seed, &[0xd157]));
    let mut batcher = Batcher::new(samples.len(), rng);
    let mut initial_loss = None;
    let mut final_loss = None;

    for step in 0..cfg.steps {
        let lr = cosine_lr(&cfg.optim, step, cfg.steps);
        opt.set_learning_rate(lr);

        let idxs = batcher.next(cfg.batch_size);
        let patches: Vec<SamplePair> = idxs
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                data::sample_patch(
                    &samples[i],
                    cfg.patch,
                    data::mix_seed(cfg.seed, &[2, step, slot as u64]),
                )
            })
            .collect();
        let vis = batch_images(&patches, |p| &p.vis, &dev)?;
        let ir = batch_images(&patches, |p| &p.ir, &dev)?;
        let gvis = batch_images(&patches, |p| &p.vis_guid, &dev)?;
        let gir = batch_images(&patches, |p| &p.ir_guid, &dev)?;
        let text_rows: Vec<Tensor> = patches
            .iter()
            .map(|p| embeddings[&p.category].clone())
            .collect();
        let text = Tensor::cat(&text_rows, 0)?;

        let (t_fused, t_pyr) = teacher.forward(&vis, &ir, Some(&text))?;
        let t_fused = t_fused.detach();
        let t_feats: Vec<Tensor> = t_pyr.fused.iter().map(|t| t.detach()).collect();

        let (s_fused, s_pyr) = student.forward(&vis, &ir, None)?;

        let base = losses::teacher_loss(&s_fused, &gvis, &gir, &fixed)?;
        let feat = losses::l_feat(&t_feats, &s_pyr.fused, &proj)?;
        let res = losses::l_res(&t_fused, &s_fused)?;
        let total = losses::distill_loss(&base.total, &feat, &res, alpha)?;

        let feat_v = feat.to_dtype(DType::F64)?.to_vec0::<f64>()?;
        let res_v = res.to_dtype(DType::F64)?.to_vec0::<f64>()?;
        let total_value = alpha[0] * base.breakdown.total + alpha[1] * feat_v + alpha[2] * res_v;
        if !total_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch_ids: patches.iter().map(|p| p.id.clone()).collect(),
            });
        }
        if initial_loss.is_none() {
            initial_loss = Some(total_value);
        }
        final_loss = Some(total_value);

        let mut grads = total.backward()?;
        clip_gradients(&mut grads, &vars, cfg.optim.clip_norm)?;
        opt.step(&grads)?;

        log.row(
            step,
            Stage::Distill,
            [
                base.breakdown.l_int,
                base.breakdown.l_ssim,
                base.breakdown.l_grad,
                base.breakdown.l_color,
                feat_v,
                res_v,
            ],
            total_value,
            lr,
        )?;

        if cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 && step + 1 < cfg.steps {
            let ckpt = Checkpoint::from_varmap(
                Stage::Distill,
                step + 1,
                &cfg.net,
                RngState::capture(cfg.seed, &batcher.rng),
                &varmap,
            )?;
            save_checkpoint(&ckpt, &cfg.out_dir.join(format!("student_step{}.ckpt", step + 1)))?;
        }
    }

    let checkpoint = Checkpoint::from_varmap(
        Stage::Distill,
        cfg.steps,
        &cfg.net,
        RngState::capture(cfg.seed, &batcher.rng),
        &varmap,
    )?;
    let ckpt_path = cfg.out_dir.join("student.ckpt");
    save_checkpoint(&checkpoint, &ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint,
        ckpt_path,
        log_path: log.path.clone(),
        initial_loss,
        final_loss,
    })
}

/// Inference wrapper holding a frozen network built once from a checkpoint.
pub struct Fuser {
    model: FusionNet,
    net: NetConfig,
}

impl Fuser {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        let model = FusionNet::from_tensors(&ckpt.net, &ckpt.tensors, "net", &Device::Cpu)?;
        Ok(Self {
            model,
            net: ckpt.net.clone(),
        })
    }

    pub fn net(&self) -> &NetConfig {
        &self.net
    }

    /// Runs fusion: pad, forward, clamp, unpad. Text-conditioned networks
    /// require a category; text-free ones ignore it.
    pub fn fuse(
        &self,
        vis: &Image,
        ir: &Image,
        category: Option<&str>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Image> {
        let dev = Device::Cpu;
        if (vis.height(), vis.width()) != (ir.height(), ir.width()) {
            return Err(Error::shape_mismatch(
                (vis.height(), vis.width()),
                (ir.height(), ir.width()),
            ));
        }
        let vis_t = ops::image_to_tensor(vis, &dev, DType::F32)?;
        let ir_t = ops::image_to_tensor(&crate::imgmath::luma(ir), &dev, DType::F32)?;
        let text = if self.net.with_text {
            let cat = category.ok_or(Error::MissingText)?;
            Some(embedding_tensor(provider, cat, self.net.text_dim, &dev)?)
        } else {
            None
        };
        let (out, _) = self.model.forward(&vis_t, &ir_t, text.as_ref())?;
        ops::tensor_to_image(&out.clamp(0.0, 1.0)?)
    }
}

/// One-shot fusion from a checkpoint.
pub fn fuse_image(
    ckpt: &Checkpoint,
    vis: &Image,
    ir: &Image,
    category: Option<&str>,
    provider: &dyn EmbeddingProvider,
) -> Result<Image> {
    Fuser::new(ckpt)?.fuse(vis, ir, category, provider)
}
