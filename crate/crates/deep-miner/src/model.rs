//! The assembled multi-branch network.
//!
//! The global branch is the backbone itself. Each input-erased branch forks
//! off after a configurable block: it consumes the erased version of that
//! block's (post-attention) output through its own clones of the remaining
//! blocks, so no weights are shared between branches. The local branch
//! clones the final block after block B-1 and pools stripe-wise. Every
//! branch ends in a global pooling, a BNNeck and a bias-free identity
//! classifier.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::{att, AttentionModule};
use crate::erasing::{channel_avg, ero, min_max_norm, EraseMask};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_forward, clone_block, conv_block_forward, BatchNormState, ConvBlock, Init, Mode,
    ParamStore,
};
use crate::tensor::{Tape, Tensor};

/// Identifies a branch: the global backbone, the k-th input-erased branch
/// (1-based, ordered by fork position), or the local stripe branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BranchId {
    Global,
    Erased(usize),
    Local,
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BranchId::Global => write!(f, "g"),
            BranchId::Erased(k) => write!(f, "e{k}"),
            BranchId::Local => write!(f, "l"),
        }
    }
}

impl BranchId {
    pub fn parse(s: &str) -> Option<BranchId> {
        match s {
            "g" => Some(BranchId::Global),
            "l" => Some(BranchId::Local),
            _ => s
                .strip_prefix('e')
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(BranchId::Erased),
        }
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub block_widths: Vec<usize>,
    pub block_strides: Vec<usize>,
    /// Fork positions of the input-erased branches: a branch at position i
    /// consumes the erased output of block i through clones of blocks i+1..B.
    pub ie_positions: Vec<usize>,
    pub tau: f64,
    pub local_branch: bool,
    pub local_stripes: usize,
    /// (branch, block) pairs after which an attention module sits.
    pub attention_sites: Vec<(BranchId, usize)>,
    pub num_identities: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl ModelConfig {
    /// The ablation-optimal shape: erased branches after blocks 2 and 3,
    /// threshold 0.8, local branch with 4 stripes, attention on the global
    /// branch after blocks 2 and 3 and on the first erased branch after its
    /// cloned block 3.
    pub fn deep_miner(num_identities: usize) -> Self {
        let ie_positions = vec![2, 3];
        let attention_sites = Self::default_attention_sites(&[2, 3], &ie_positions);
        ModelConfig {
            block_widths: vec![16, 32, 64, 128],
            block_strides: vec![1, 2, 2, 1],
            ie_positions,
            tau: 0.8,
            local_branch: true,
            local_stripes: 4,
            attention_sites,
            num_identities,
            input_h: 48,
            input_w: 16,
        }
    }

    /// Global branch only, no attention.
    pub fn baseline(num_identities: usize) -> Self {
        ModelConfig {
            ie_positions: Vec::new(),
            local_branch: false,
            attention_sites: Vec::new(),
            ..Self::deep_miner(num_identities)
        }
    }

    /// Global-branch sites at `g_blocks`, plus the sites each erased branch
    /// inherits for the cloned blocks it owns (those strictly after its fork
    /// position).
    pub fn default_attention_sites(
        g_blocks: &[usize],
        ie_positions: &[usize],
    ) -> Vec<(BranchId, usize)> {
        let mut sites: Vec<(BranchId, usize)> =
            g_blocks.iter().map(|&j| (BranchId::Global, j)).collect();
        for (idx, &p) in ie_positions.iter().enumerate() {
            for &j in g_blocks {
                if j > p {
                    sites.push((BranchId::Erased(idx + 1), j));
                }
            }
        }
        sites.sort();
        sites
    }

    pub fn num_blocks(&self) -> usize {
        self.block_widths.len()
    }

    /// Spatial extent of the final feature map under 3x3/pad-1 block convs.
    pub fn final_extent(&self) -> (usize, usize) {
        let mut h = self.input_h;
        let mut w = self.input_w;
        for &s in &self.block_strides {
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
        }
        (h, w)
    }

    /// Branches in their stable order: g, e1, e2, ..., l.
    pub fn branches(&self) -> Vec<BranchId> {
        let mut out = vec![BranchId::Global];
        for k in 1..=self.ie_positions.len() {
            out.push(BranchId::Erased(k));
        }
        if self.local_branch {
            out.push(BranchId::Local);
        }
        out
    }

    /// Feature dimension of each branch, in branch order.
    pub fn feature_dims(&self) -> Vec<(BranchId, usize)> {
        let base = *self.block_widths.last().expect("validated config");
        self.branches()
            .into_iter()
            .map(|id| {
                let dim = match id {
                    BranchId::Local => self.local_stripes * base,
                    _ => base,
                };
                (id, dim)
            })
            .collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.feature_dims().iter().map(|(_, d)| d).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ConfigInvalid(msg));
        let b = self.block_widths.len();
        if b == 0 {
            return fail("block_widths must not be empty".into());
        }
        if self.block_strides.len() != b {
            return fail(format!(
                "block_strides has {} entries for {b} blocks",
                self.block_strides.len()
            ));
        }
        if self.block_widths.iter().any(|&w| w == 0) {
            return fail("block widths must be positive".into());
        }
        if self.block_strides.iter().any(|&s| s == 0) {
            return fail("block strides must be >= 1".into());
        }
        if !self.ie_positions.windows(2).all(|w| w[0] < w[1]) {
            return fail(format!(
                "ie_positions {:?} must be sorted and distinct",
                self.ie_positions
            ));
        }
        if let Some(&p) = self.ie_positions.iter().find(|&&p| p == 0 || p >= b) {
            return fail(format!("ie position {p} outside 1..={}", b - 1));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau {} outside [0,1]", self.tau));
        }
        if self.local_branch {
            if b < 2 {
                return fail("local branch needs at least 2 blocks".into());
            }
            if self.local_stripes == 0 {
                return fail("local_stripes must be >= 1".into());
            }
            let (h, _) = self.final_extent();
            if h % self.local_stripes != 0 {
                return fail(format!(
                    "final feature-map height {h} not divisible into {} stripes",
                    self.local_stripes
                ));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for &(branch, j) in &self.attention_sites {
            if !seen.insert((branch, j)) {
                return fail(format!("duplicate attention site ({branch}, {j})"));
            }
            if j == 0 || j > b {
                return fail(format!("attention site block {j} outside 1..={b}"));
            }
            if self.block_widths[j - 1] % 16 != 0 {
                return fail(format!(
                    "attention site ({branch}, {j}) on width {} not divisible by 16",
                    self.block_widths[j - 1]
                ));
            }
            match branch {
                BranchId::Global => {}
                BranchId::Erased(k) => {
                    if k == 0 || k > self.ie_positions.len() {
                        return fail(format!("attention site on unknown branch e{k}"));
                    }
                    if j <= self.ie_positions[k - 1] {
                        return fail(format!(
                            "attention site (e{k}, {j}) precedes the branch fork at {}",
                            self.ie_positions[k - 1]
                        ));
                    }
                }
                BranchId::Local => {
                    return fail("local branch carries no attention".into());
                }
            }
        }
        if self.num_identities == 0 {
            return fail("num_identities must be >= 1".into());
        }
        if self.input_h == 0 || self.input_w == 0 {
            return fail("input extent must be positive".into());
        }
        Ok(())
    }
}

/// One branch's outputs: raw pooled feature, post-BNNeck feature, and
/// identity logits.
pub struct BranchFeature {
    pub branch: BranchId,
    pub f: Tensor,
    pub f_bn: Tensor,
    pub logits: Tensor,
}

/// All branch outputs in the stable order g, e1, e2, ..., l.
pub struct BranchOutputs {
    pub branches: Vec<BranchFeature>,
}

impl BranchOutputs {
    pub fn get(&self, id: BranchId) -> Option<&BranchFeature> {
        self.branches.iter().find(|b| b.branch == id)
    }
}

/// Intermediate activations captured during a traced forward pass.
#[derive(Default)]
pub struct ForwardTrace {
    /// Final pre-pool feature map of each branch.
    pub final_maps: Vec<(BranchId, Tensor)>,
    /// Per erased branch: (k, normalized saliency, mask).
    pub erasures: Vec<(usize, Tensor, EraseMask)>,
}

/// BNNeck head: feature batchnorm (beta frozen at 0) and a bias-free
/// classifier.
pub struct Head {
    pub branch: BranchId,
    pub bn: BatchNormState,
    pub classifier: Tensor,
}

struct IeBranch {
    position: usize,
    blocks: Vec<ConvBlock>,
}

pub struct DeepMiner {
    cfg: ModelConfig,
    store: ParamStore,
    g_blocks: Vec<ConvBlock>,
    attention: BTreeMap<(BranchId, usize), AttentionModule>,
    ie_branches: Vec<IeBranch>,
    local_block: Option<ConvBlock>,
    heads: Vec<Head>,
}

/// Constructs the model with seeded parameters: backbone blocks, attention
/// modules, branch clones (value-equal at build time), and per-branch heads.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<DeepMiner> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let b = cfg.num_blocks();

    let mut g_blocks = Vec::with_capacity(b);
    let mut prev_c = 3;
    for i in 0..b {
        g_blocks.push(ConvBlock::new(
            &mut init,
            prev_c,
            cfg.block_widths[i],
            cfg.block_strides[i],
        ));
        prev_c = cfg.block_widths[i];
    }

    let mut sites = cfg.attention_sites.clone();
    sites.sort();
    let mut attention: BTreeMap<(BranchId, usize), AttentionModule> = BTreeMap::new();
    for &(branch, j) in sites.iter().filter(|(br, _)| *br == BranchId::Global) {
        attention.insert(
            (branch, j),
            AttentionModule::new(&mut init, cfg.block_widths[j - 1])?,
        );
    }
    // erased-branch modules clone the global module at the same block when it
    // exists, matching the shared initialization of the cloned blocks
    for &(branch, j) in sites.iter().filter(|(br, _)| *br != BranchId::Global) {
        let module = match attention.get(&(BranchId::Global, j)) {
            Some(m) => m.deep_clone(),
            None => AttentionModule::new(&mut init, cfg.block_widths[j - 1])?,
        };
        attention.insert((branch, j), module);
    }

    let ie_branches: Vec<IeBranch> = cfg
        .ie_positions
        .iter()
        .map(|&p| IeBranch {
            position: p,
            blocks: g_blocks[p..].iter().map(clone_block).collect(),
        })
        .collect();

    let local_block = cfg.local_branch.then(|| clone_block(&g_blocks[b - 1]));

    let heads: Vec<Head> = cfg
        .feature_dims()
        .into_iter()
        .map(|(branch, dim)| Head {
            branch,
            bn: BatchNormState::with_frozen_beta(dim),
            classifier: init.linear(dim, cfg.num_identities),
        })
        .collect();

    // registration order fixes the store's iteration (and checkpoint) layout
    let mut store = ParamStore::new();
    for (i, block) in g_blocks.iter().enumerate() {
        for (suffix, t) in block.named_tensors() {
            store.insert(format!("g.block{}.{suffix}", i + 1), t.clone());
        }
    }
    for ((branch, j), module) in &attention {
        for (suffix, t) in module.named_tensors() {
            store.insert(format!("{branch}.att{j}.{suffix}"), t.clone());
        }
    }
    for (idx, ie) in ie_branches.iter().enumerate() {
        for (off, block) in ie.blocks.iter().enumerate() {
            for (suffix, t) in block.named_tensors() {
                store.insert(
                    format!("e{}.block{}.{suffix}", idx + 1, ie.position + 1 + off),
                    t.clone(),
                );
            }
        }
    }
    if let Some(block) = &local_block {
        for (suffix, t) in block.named_tensors() {
            store.insert(format!("l.block{b}.{suffix}"), t.clone());
        }
    }
    for head in &heads {
        for (suffix, t) in head.bn.named_tensors() {
            store.insert(format!("head.{}.bn.{suffix}", head.branch), t.clone());
        }
        store.insert(
            format!("head.{}.classifier", head.branch),
            head.classifier.clone(),
        );
    }

    Ok(DeepMiner {
        cfg: cfg.clone(),
        store,
        g_blocks,
        attention,
        ie_branches,
        local_block,
        heads,
    })
}

/// Stripe pooling: splits the map height into contiguous bands, average-pools
/// each band to a C-vector and concatenates top to bottom.
pub fn local_head(tape: &Tape, feat: &Tensor, stripes: usize) -> Result<Tensor> {
    let [n, c, h, w] = *feat.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "local_head expects [N,C,H,W], got {:?}",
            feat.shape()
        )));
    };
    if stripes == 0 || h % stripes != 0 {
        return Err(Error::IndivisibleHeight { height: h, stripes });
    }
    let band = h / stripes;
    let split = tape.reshape(feat, vec![n, c, stripes, band, w])?;
    let pooled = tape.mean(&split, &[3, 4], false)?; // [N,C,S]
    let ordered = tape.transpose(&pooled, &[0, 2, 1])?; // [N,S,C]
    tape.reshape(&ordered, vec![n, stripes * c])
}

/// BNNeck: per-feature batchnorm then bias-free classifier logits.
pub fn bnneck(tape: &Tape, f: &Tensor, head: &Head, mode: Mode) -> Result<(Tensor, Tensor)> {
    if f.rank() != 2 || f.shape()[1] != head.bn.channels() {
        return Err(Error::ShapeMismatch(format!(
            "bnneck expects [N,{}], got {:?}",
            head.bn.channels(),
            f.shape()
        )));
    }
    let f_bn = batchnorm_forward(tape, f, &head.bn, mode)?;
    let logits = tape.matmul(&f_bn, &head.classifier)?;
    Ok((f_bn, logits))
}

/// Re-labels a non-finite failure with the branch it surfaced in, so a NaN
/// parameter aborts training with the offending branch named.
fn branch_ctx<T>(branch: BranchId, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFiniteInput(op) => Error::TrainAbort(format!(
            "non-finite value in branch {branch} (op {op})"
        )),
        other => other,
    })
}

/// Concatenation of the post-BNNeck features in stable branch order.
pub fn inference_embedding(outputs: &BranchOutputs) -> Tensor {
    let n = outputs.branches[0].f_bn.shape()[0];
    let total: usize = outputs.branches.iter().map(|b| b.f_bn.shape()[1]).sum();
    let mut data = vec![0.0; n * total];
    let mut offset = 0;
    for b in &outputs.branches {
        let d = b.f_bn.shape()[1];
        let src = b.f_bn.data();
        for i in 0..n {
            data[i * total + offset..i * total + offset + d]
                .copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        offset += d;
    }
    Tensor::from_parts(vec![n, total], data, false)
}

impl DeepMiner {
    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, tape: &Tape, images: &Tensor, mode: Mode) -> Result<BranchOutputs> {
        self.forward_traced(tape, images, mode, None)
    }

    /// Forward pass optionally capturing per-branch final maps and the
    /// erasing intermediates (for visualization).
    pub fn forward_traced(
        &self,
        tape: &Tape,
        images: &Tensor,
        mode: Mode,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<BranchOutputs> {
        let [n, c, h, w] = *images.shape() else {
            return Err(Error::ShapeMismatch(format!(
                "forward expects [N,3,H,W], got {:?}",
                images.shape()
            )));
        };
        if c != 3 || h != self.cfg.input_h || w != self.cfg.input_w {
            return Err(Error::ShapeMismatch(format!(
                "forward expects [N,3,{},{}], got {:?}",
                self.cfg.input_h,
                self.cfg.input_w,
                images.shape()
            )));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::DegenerateBatch(
                "train-mode forward needs a batch of >= 2 images".into(),
            ));
        }

        let b = self.cfg.num_blocks();
        let mut cur = images.clone();
        let mut taps: Vec<Tensor> = Vec::with_capacity(b);
        for i in 1..=b {
            cur = branch_ctx(
                BranchId::Global,
                conv_block_forward(tape, &cur, &self.g_blocks[i - 1], mode),
            )?;
            if let Some(module) = self.attention.get(&(BranchId::Global, i)) {
                cur = branch_ctx(BranchId::Global, att(tape, &cur, module, mode))?;
            }
            taps.push(cur.clone());
        }

        let mut features: Vec<(BranchId, Tensor)> = Vec::new();
        if let Some(tr) = trace.as_deref_mut() {
            tr.final_maps.push((BranchId::Global, taps[b - 1].clone()));
        }
        features.push((
            BranchId::Global,
            tape.max_reduce(&taps[b - 1], &[2, 3], false)?,
        ));

        for (idx, branch) in self.ie_branches.iter().enumerate() {
            let k = idx + 1;
            let source = &taps[branch.position - 1];
            if let Some(tr) = trace.as_deref_mut() {
                let saliency = min_max_norm(&channel_avg(source)?)?;
                let mask = crate::erasing::erase_mask(&saliency, self.cfg.tau)?;
                tr.erasures.push((k, saliency, mask));
            }
            let id = BranchId::Erased(k);
            let erased = branch_ctx(id, ero(tape, source, self.cfg.tau))?;
            let mut cur = erased.values;
            for (off, block) in branch.blocks.iter().enumerate() {
                let j = branch.position + 1 + off;
                cur = branch_ctx(id, conv_block_forward(tape, &cur, block, mode))?;
                if let Some(module) = self.attention.get(&(id, j)) {
                    cur = branch_ctx(id, att(tape, &cur, module, mode))?;
                }
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.final_maps.push((BranchId::Erased(k), cur.clone()));
            }
            features.push((BranchId::Erased(k), tape.max_reduce(&cur, &[2, 3], false)?));
        }

        if let Some(block) = &self.local_block {
            let source = &taps[b - 2];
            let map = branch_ctx(
                BranchId::Local,
                conv_block_forward(tape, source, block, mode),
            )?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.final_maps.push((BranchId::Local, map.clone()));
            }
            features.push((
                BranchId::Local,
                branch_ctx(
                    BranchId::Local,
                    local_head(tape, &map, self.cfg.local_stripes),
                )?,
            ));
        }

        let mut branches = Vec::with_capacity(features.len());
        for (head, (branch, f)) in self.heads.iter().zip(features) {
            debug_assert_eq!(head.branch, branch);
            let (f_bn, logits) = branch_ctx(branch, bnneck(tape, &f, head, mode))?;
            branches.push(BranchFeature {
                branch,
                f,
                f_bn,
                logits,
            });
        }
        Ok(BranchOutputs { branches })
    }

    /// Eval-mode embeddings for a batch of images, without recording.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let outputs = self.forward(&tape, images, Mode::Eval)?;
        Ok(inference_embedding(&outputs))
    }
}

// ---- checkpoint io ---------------------------------------------------------

const MAGIC: &[u8; 6] = b"DMKT1\n";

fn join(items: &[usize]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn header_text(cfg: &ModelConfig) -> String {
    let sites = cfg
        .attention_sites
        .iter()
        .map(|(br, j)| format!("{br}:{j}"))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "block_widths={}\nblock_strides={}\nie_positions={}\ntau={}\nlocal_branch={}\nlocal_stripes={}\nattention_sites={}\nnum_identities={}\ninput_h={}\ninput_w={}\n",
        join(&cfg.block_widths),
        join(&cfg.block_strides),
        join(&cfg.ie_positions),
        cfg.tau,
        cfg.local_branch,
        cfg.local_stripes,
        sites,
        cfg.num_identities,
        cfg.input_h,
        cfg.input_w,
    )
}

fn parse_usize_list(v: &str, key: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::FormatError(format!("bad {key} entry '{s}'")))
        })
        .collect()
}

fn parse_header(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig {
        block_widths: Vec::new(),
        block_strides: Vec::new(),
        ie_positions: Vec::new(),
        tau: f64::NAN,
        local_branch: false,
        local_stripes: 0,
        attention_sites: Vec::new(),
        num_identities: 0,
        input_h: 0,
        input_w: 0,
    };
    let mut seen = std::collections::HashSet::new();
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::FormatError(format!("malformed header line '{line}'")))?;
        if !seen.insert(key.to_string()) {
            return Err(Error::FormatError(format!("duplicate header key '{key}'")));
        }
        match key {
            "block_widths" => cfg.block_widths = parse_usize_list(value, key)?,
            "block_strides" => cfg.block_strides = parse_usize_list(value, key)?,
            "ie_positions" => cfg.ie_positions = parse_usize_list(value, key)?,
            "tau" => {
                cfg.tau = value
                    .parse()
                    .map_err(|_| Error::FormatError(format!("bad tau '{value}'")))?
            }
            "local_branch" => {
                cfg.local_branch = value
                    .parse()
                    .map_err(|_| Error::FormatError(format!("bad local_branch '{value}'")))?
            }
            "local_stripes" => {
                cfg.local_stripes = value
                    .parse()
                    .map_err(|_| Error::FormatError(format!("bad local_stripes '{value}'")))?
            }
            "attention_sites" => {
                if !value.is_empty() {
                    for item in value.split(',') {
                        let (br, j) = item.split_once(':').ok_or_else(|| {
                            Error::FormatError(format!("bad attention site '{item}'"))
                        })?;
                        let branch = BranchId::parse(br)
                            .ok_or_else(|| Error::FormatError(format!("bad branch id '{br}'")))?;
                        let block = j
                            .parse()
                            .map_err(|_| Error::FormatError(format!("bad attention block '{j}'")))?;
                        cfg.attention_sites.push((branch, block));
                    }
                }
            }
            "num_identities" => {
                cfg.num_identities = value
                    .parse()
                    .map_err(|_| Error::FormatError(format!("bad num_identities '{value}'")))?
            }
            "input_h" => {
                cfg.input_h = value
                    .parse()
                    .map_err(|_| Error::FormatError(format!("bad input_h '{value}'")))?
            }
            "input_w" => {
                cfg.input_w = value
                    .parse()
                    .map_err(|_| Error::FormatError(format!("bad input_w '{value}'")))?
            }
            other => return Err(Error::FormatError(format!("unknown header key '{other}'"))),
        }
    }
    for key in [
        "block_widths",
        "block_strides",
        "tau",
        "local_stripes",
        "num_identities",
        "input_h",
        "input_w",
    ] {
        if !seen.contains(key) {
            return Err(Error::FormatError(format!("missing header key '{key}'")));
        }
    }
    Ok(cfg)
}

/// Writes the config header and every store tensor, bit-exactly.
pub fn save_checkpoint(model: &DeepMiner, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    let header = header_text(&model.cfg);
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    for (name, tensor) in model.store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in tensor.data().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::FormatError(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Rebuilds a model from a checkpoint; every tensor must match the declared
/// config's shapes exactly.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DeepMiner> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::FormatError("bad magic bytes".into()));
    }
    let header_len = read_u32(&mut input, "header length")? as usize;
    let mut header = vec![0u8; header_len];
    read_exact(&mut input, &mut header, "header")?;
    let header =
        String::from_utf8(header).map_err(|_| Error::FormatError("header not UTF-8".into()))?;
    let cfg = parse_header(&header)?;
    cfg.validate()
        .map_err(|e| Error::FormatError(format!("invalid config in checkpoint: {e}")))?;

    let model = build_model(&cfg, 0)?;
    let mut filled: std::collections::HashSet<String> = std::collections::HashSet::new();
    loop {
        let mut len_buf = [0u8; 4];
        match input.read(&mut len_buf) {
            Ok(0) => break, // clean EOF
            Ok(4) => {}
            Ok(_) => return Err(Error::FormatError("truncated tensor record".into())),
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut input, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::FormatError("tensor name not UTF-8".into()))?;
        let rank = read_u32(&mut input, "tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input, "tensor extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut vbuf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut input, &mut vbuf, &format!("values of '{name}'"))?;
            values.push(f64::from_le_bytes(vbuf));
        }
        let target = model.store.get(&name).ok_or_else(|| {
            Error::FormatError(format!("tensor '{name}' not part of the declared config"))
        })?;
        if target.shape() != shape.as_slice() {
            return Err(Error::FormatError(format!(
                "tensor '{name}' has shape {:?}, config requires {:?}",
                shape,
                target.shape()
            )));
        }
        target
            .set_data(values)
            .map_err(|_| Error::FormatError(format!("non-finite values in tensor '{name}'")))?;
        if !filled.insert(name.clone()) {
            return Err(Error::FormatError(format!("duplicate tensor '{name}'")));
        }
    }
    if filled.len() != model.store.len() {
        let missing = model
            .store
            .iter()
            .map(|(n, _)| n)
            .find(|n| !filled.contains(*n))
            .unwrap_or("?");
        return Err(Error::FormatError(format!(
            "checkpoint is missing tensor '{missing}'"
        )));
    }
    Ok(model)
}
