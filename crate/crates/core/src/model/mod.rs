//! The end-to-end network: embedding with learned positional encodings,
//! object aggregation (self- and cross-attention), multi-scale scene
//! pooling, causal temporal attention, per-scale post-fusion and the MLP
//! risk head.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Component, MsfinConfig, TemporalLayer};

use rand::Rng;

use crate::attention::{stack, AttentionBlock, BatchMask};
use crate::error::{Error, Result};
use crate::feature_io::SequenceRecord;
use crate::multiscale::{msm_forward, MsmParams, Scale};
use crate::params::{init_uniform, join, Linear};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Temporal and post-fusion stacks of one scale branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleBranch<P> {
    pub scale: Scale,
    pub ctm: Vec<AttentionBlock<P>>,
    /// Empty when post-fusion cross-attention is disabled.
    pub cam_post: Vec<AttentionBlock<P>>,
}

/// All learnable parameters. Disabled components hold no tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct MsfinParams<P> {
    pub embed_frame: Linear<P>,
    pub embed_object: Linear<P>,
    /// `[max_frames, d]`.
    pub pos_enc: P,
    /// `[d]`, fills slot 0 on frames without any valid object.
    pub no_object: P,
    pub sam: Vec<AttentionBlock<P>>,
    pub cam_pre: Vec<AttentionBlock<P>>,
    /// `[k·d → d]` over the concatenated SaM/CaM outputs (`None` when both
    /// are disabled).
    pub agg: Option<Linear<P>>,
    pub msm: MsmParams<P>,
    pub ctm_object: Vec<AttentionBlock<P>>,
    pub branches: Vec<ScaleBranch<P>>,
    pub mlp: [Linear<P>; 3],
}

fn map_blocks<P, Q>(blocks: &[AttentionBlock<P>], f: &mut dyn FnMut(&P) -> Q) -> Vec<AttentionBlock<Q>> {
    blocks.iter().map(|b| b.map(f)).collect()
}

fn visit_blocks<P>(blocks: &[AttentionBlock<P>], prefix: &str, f: &mut dyn FnMut(&str, &P)) {
    for (i, b) in blocks.iter().enumerate() {
        b.visit(&join(prefix, &i.to_string()), f);
    }
}

fn visit_blocks_mut<P>(blocks: &mut [AttentionBlock<P>], prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.visit_mut(&join(prefix, &i.to_string()), f);
    }
}

impl<P> MsfinParams<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> MsfinParams<Q> {
        MsfinParams {
            embed_frame: self.embed_frame.map(f),
            embed_object: self.embed_object.map(f),
            pos_enc: f(&self.pos_enc),
            no_object: f(&self.no_object),
            sam: map_blocks(&self.sam, f),
            cam_pre: map_blocks(&self.cam_pre, f),
            agg: self.agg.as_ref().map(|l| l.map(f)),
            msm: self.msm.map(f),
            ctm_object: map_blocks(&self.ctm_object, f),
            branches: self
                .branches
                .iter()
                .map(|b| ScaleBranch {
                    scale: b.scale,
                    ctm: map_blocks(&b.ctm, f),
                    cam_post: map_blocks(&b.cam_post, f),
                })
                .collect(),
            mlp: [self.mlp[0].map(f), self.mlp[1].map(f), self.mlp[2].map(f)],
        }
    }

    /// Visits every tensor in a fixed order with its dotted name.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &P)) {
        self.embed_frame.visit("embed_frame", f);
        self.embed_object.visit("embed_object", f);
        f("pos_enc", &self.pos_enc);
        f("no_object", &self.no_object);
        visit_blocks(&self.sam, "sam", f);
        visit_blocks(&self.cam_pre, "cam_pre", f);
        if let Some(agg) = &self.agg {
            agg.visit("agg", f);
        }
        self.msm.visit("msm", f);
        visit_blocks(&self.ctm_object, "ctm_object", f);
        for b in &self.branches {
            visit_blocks(&b.ctm, &format!("{}.ctm", b.scale.name()), f);
            visit_blocks(&b.cam_post, &format!("{}.cam_post", b.scale.name()), f);
        }
        for (i, l) in self.mlp.iter().enumerate() {
            l.visit(&format!("mlp.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        self.embed_frame.visit_mut("embed_frame", f);
        self.embed_object.visit_mut("embed_object", f);
        f("pos_enc", &mut self.pos_enc);
        f("no_object", &mut self.no_object);
        visit_blocks_mut(&mut self.sam, "sam", f);
        visit_blocks_mut(&mut self.cam_pre, "cam_pre", f);
        if let Some(agg) = &mut self.agg {
            agg.visit_mut("agg", f);
        }
        self.msm.visit_mut("msm", f);
        visit_blocks_mut(&mut self.ctm_object, "ctm_object", f);
        for b in &mut self.branches {
            let name = b.scale.name();
            visit_blocks_mut(&mut b.ctm, &format!("{name}.ctm"), f);
            visit_blocks_mut(&mut b.cam_post, &format!("{name}.cam_post"), f);
        }
        for (i, l) in self.mlp.iter_mut().enumerate() {
            l.visit_mut(&format!("mlp.{i}"), f);
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }
}

impl<F: Real> MsfinParams<Tensor<F>> {
    /// Seeded initialisation: uniform `±sqrt(1/fan_in)` weights, zero
    /// positional encodings, unit layer-norm gains.
    pub fn init<R: Rng>(cfg: &MsfinConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let blocks = |rng: &mut R, n: usize| (0..n).map(|_| AttentionBlock::init(rng, d)).collect::<Vec<_>>();
        let embed_frame = Linear::init(rng, cfg.d_in, d);
        let embed_object = Linear::init(rng, cfg.d_in, d);
        let pos_enc = Tensor::zeros([cfg.max_frames, d]);
        let no_object = init_uniform(rng, &[d], d);
        let sam = if cfg.enabled(Component::Sam) {
            blocks(rng, cfg.layers_sam)
        } else {
            vec![]
        };
        let cam_pre = if cfg.enabled(Component::CamPre) {
            blocks(rng, cfg.layers_cam)
        } else {
            vec![]
        };
        let k = cfg.object_paths();
        let agg = (k > 0).then(|| Linear::init(rng, k * d, d));
        let msm = MsmParams::init(rng, d, cfg.n_fuse());
        let ctm_object = blocks(rng, cfg.layers_ctm);
        let mut branches = Vec::new();
        for scale in cfg.scales() {
            let ctm = blocks(rng, cfg.layers_ctm);
            let cam_post = if cfg.enabled(Component::CamPost) {
                blocks(rng, cfg.layers_cam)
            } else {
                vec![]
            };
            branches.push(ScaleBranch { scale, ctm, cam_post });
        }
        let (h1, h2) = cfg.hidden();
        let mlp = [
            Linear::init(rng, cfg.scales().len() * d, h1),
            Linear::init(rng, h1, h2),
            Linear::init(rng, h2, 1),
        ];
        Ok(MsfinParams {
            embed_frame,
            embed_object,
            pos_enc,
            no_object,
            sam,
            cam_pre,
            agg,
            msm,
            ctm_object,
            branches,
            mlp,
        })
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn cast<G: Real>(&self) -> MsfinParams<Tensor<G>> {
        self.map(&mut |t| t.cast())
    }

    /// Binds every tensor as a trainable leaf.
    pub fn leaves(&self, tape: &mut Tape<F>) -> MsfinParams<Var> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    /// Binds every tensor as a constant (inference).
    pub fn constants(&self, tape: &mut Tape<F>) -> MsfinParams<Var> {
        self.map(&mut |t| tape.constant(t.clone()))
    }
}

/// Embedded inputs with the effective object mask (slot 0 forced valid on
/// frames where the no-object token was inserted).
#[derive(Debug, Clone)]
pub struct Embedded {
    /// `[T, d]`.
    pub frames: Var,
    /// `[T, N, d]`.
    pub objects: Var,
    /// `[T × N]`.
    pub mask: Vec<bool>,
}

fn check_inputs<F: Real>(
    tape: &Tape<F>,
    frames: Var,
    objects: Var,
    mask: &[bool],
    cfg: &MsfinConfig,
) -> Result<(usize, usize)> {
    let fs = tape.shape(frames);
    let os = tape.shape(objects);
    if fs.len() != 2 || os.len() != 3 || os[0] != fs[0] {
        return Err(Error::Config(format!(
            "frames {fs:?} and objects {os:?} do not form a sequence"
        )));
    }
    if fs[1] != cfg.d_in || os[2] != cfg.d_in {
        return Err(Error::Config(format!(
            "feature width {} / {} does not match d_in {}",
            fs[1], os[2], cfg.d_in
        )));
    }
    if os[1] != cfg.n_objects {
        return Err(Error::Config(format!(
            "{} object slots, config has {}",
            os[1], cfg.n_objects
        )));
    }
    let (steps, n) = (os[0], os[1]);
    if steps > cfg.max_frames {
        return Err(Error::Config(format!(
            "{steps} frames exceed the positional table ({})",
            cfg.max_frames
        )));
    }
    if mask.len() != steps * n {
        return Err(Error::dim("object mask", &[steps, n], &[mask.len()]));
    }
    Ok((steps, n))
}

/// Linear reduction `d_in → d` plus positional encodings shared by the
/// frame and all of its objects. Padded object rows are zeroed.
pub fn embed_inputs<F: Real>(
    tape: &mut Tape<F>,
    frames: Var,
    objects: Var,
    mask: &[bool],
    p: &MsfinParams<Var>,
    cfg: &MsfinConfig,
) -> Result<Embedded> {
    let (steps, n) = check_inputs(tape, frames, objects, mask, cfg)?;
    let d = cfg.d;
    let pe = tape.narrow(p.pos_enc, 0, 0, steps)?;

    let f = p.embed_frame.forward(tape, frames)?;
    let f = tape.add(f, pe)?;

    let o = p.embed_object.forward(tape, objects)?;
    let keep: Vec<F> = mask.iter().map(|&m| if m { F::one() } else { F::zero() }).collect();
    let keep = tape.constant(Tensor::new([steps, n, 1], keep)?);
    let mut o = tape.mul(o, keep)?;
    let mut eff = mask.to_vec();
    let empty: Vec<usize> = (0..steps)
        .filter(|&t| !mask[t * n..(t + 1) * n].iter().any(|&m| m))
        .collect();
    if !empty.is_empty() {
        let mut fill = vec![F::zero(); steps * n];
        for &t in &empty {
            fill[t * n] = F::one();
            eff[t * n] = true;
        }
        let fill = tape.constant(Tensor::new([steps, n, 1], fill)?);
        let token = tape.mul(fill, p.no_object)?;
        o = tape.add(o, token)?;
    }
    let pe_obj = tape.reshape(pe, &[steps, 1, d])?;
    let o = tape.add(o, pe_obj)?;
    Ok(Embedded {
        frames: f,
        objects: o,
        mask: eff,
    })
}

/// Per frame: self-attention among objects and cross-attention from objects
/// to the frame feature, concatenated and projected back to `d`.
pub fn aggregate_objects<F: Real>(
    tape: &mut Tape<F>,
    emb: &Embedded,
    p: &MsfinParams<Var>,
    cfg: &MsfinConfig,
) -> Result<Var> {
    let agg = match &p.agg {
        Some(agg) => agg,
        None => return Ok(emb.objects),
    };
    let steps = tape.shape(emb.frames)[0];
    let acfg = cfg.attention();
    let mut parts = Vec::with_capacity(2);
    if !p.sam.is_empty() {
        let mask = BatchMask::KeyValid(emb.mask.clone());
        parts.push(stack(tape, &p.sam, emb.objects, None, &acfg, &mask)?.0);
    }
    if !p.cam_pre.is_empty() {
        let kv = tape.reshape(emb.frames, &[steps, 1, cfg.d])?;
        parts.push(stack(tape, &p.cam_pre, emb.objects, Some(kv), &acfg, &BatchMask::None)?.0);
    }
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 2)?
    };
    agg.forward(tape, cat)
}

/// Causal temporal attention: each object's own sequence through the shared
/// object stack, each scale's frame sequence through its own stack.
/// Returns `(Õ [T, N, d], F̃_p [T, d] per branch)`.
pub fn temporal_process<F: Real>(
    tape: &mut Tape<F>,
    objects: Var,
    scale_feats: &[Var],
    mask: &[bool],
    p: &MsfinParams<Var>,
    cfg: &MsfinConfig,
) -> Result<(Var, Vec<Var>)> {
    let s = tape.shape(objects).to_vec();
    let (steps, n, d) = (s[0], s[1], s[2]);
    let acfg = cfg.attention();
    let mut by_object = vec![false; n * steps];
    for t in 0..steps {
        for j in 0..n {
            by_object[j * steps + t] = mask[t * n + j];
        }
    }
    let seq = tape.permute(objects, &[1, 0, 2])?;
    let (seq, _) = stack(
        tape,
        &p.ctm_object,
        seq,
        None,
        &acfg,
        &BatchMask::CausalKeyValid(by_object),
    )?;
    let o_tilde = tape.permute(seq, &[1, 0, 2])?;

    let mut frames_out = Vec::with_capacity(scale_feats.len());
    for (feat, branch) in scale_feats.iter().zip(&p.branches) {
        let x = tape.reshape(*feat, &[1, steps, d])?;
        let (x, _) = stack(tape, &branch.ctm, x, None, &acfg, &BatchMask::Causal)?;
        frames_out.push(tape.reshape(x, &[steps, d])?);
    }
    Ok((o_tilde, frames_out))
}

/// Cross-attention from each scale's frame feature to that frame's objects.
/// Returns `H_p [T, d]` and the final-layer weights `[heads, T, N]` per
/// branch. Without post-fusion attention, `H_p` is `F̃_p` plus the mean of
/// the valid object rows and the weights are that uniform average.
pub fn post_fuse<F: Real>(
    tape: &mut Tape<F>,
    scale_feats: &[Var],
    objects: Var,
    mask: &[bool],
    p: &MsfinParams<Var>,
    cfg: &MsfinConfig,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let s = tape.shape(objects).to_vec();
    let (steps, n, d) = (s[0], s[1], s[2]);
    let acfg = cfg.attention();
    let mut fused = Vec::with_capacity(scale_feats.len());
    let mut weights = Vec::with_capacity(scale_feats.len());
    for (feat, branch) in scale_feats.iter().zip(&p.branches) {
        let q = tape.reshape(*feat, &[steps, 1, d])?;
        if branch.cam_post.is_empty() {
            let mut avg = vec![F::zero(); steps * n];
            for t in 0..steps {
                let row = &mask[t * n..(t + 1) * n];
                let k = row.iter().filter(|&&m| m).count();
                if k == 0 {
                    return Err(Error::MaskedRow { row: t });
                }
                for j in 0..n {
                    if row[j] {
                        avg[t * n + j] = F::one() / F::c(k as f64);
                    }
                }
            }
            let w = tape.constant(Tensor::new([steps, 1, n], avg)?);
            let pooled = tape.matmul(w, objects)?;
            let h = tape.add(q, pooled)?;
            fused.push(tape.reshape(h, &[steps, d])?);
            weights.push(tape.reshape(w, &[1, steps, n])?);
        } else {
            let mask = BatchMask::KeyValid(mask.to_vec());
            let (h, w) = stack(tape, &branch.cam_post, q, Some(objects), &acfg, &mask)?;
            let w = w.expect("non-empty stack");
            let w = tape.permute(w, &[1, 0, 2, 3])?;
            fused.push(tape.reshape(h, &[steps, d])?);
            weights.push(tape.reshape(w, &[cfg.heads, steps, n])?);
        }
    }
    Ok((fused, weights))
}

/// `sigmoid(MLP(concat H_p))` over frames: `[T]`.
pub fn predict_risk<F: Real>(tape: &mut Tape<F>, fused: &[Var], p: &MsfinParams<Var>) -> Result<Var> {
    let steps = tape.shape(fused[0])[0];
    let x = if fused.len() == 1 {
        fused[0]
    } else {
        tape.concat(fused, 1)?
    };
    let h = p.mlp[0].forward(tape, x)?;
    let h = tape.gelu(h);
    let h = p.mlp[1].forward(tape, h)?;
    let h = tape.gelu(h);
    let z = p.mlp[2].forward(tape, h)?;
    let z = tape.sigmoid(z);
    tape.reshape(z, &[steps])
}

/// Tape handles of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[T]` probabilities.
    pub probs: Var,
    /// `[heads, T, N]` post-fusion weights per branch.
    pub attn: Vec<(Scale, Var)>,
}

/// Full forward pass over tape-resident inputs.
pub fn forward_vars<F: Real>(
    tape: &mut Tape<F>,
    frames: Var,
    objects: Var,
    mask: &[bool],
    p: &MsfinParams<Var>,
    cfg: &MsfinConfig,
) -> Result<ForwardVars> {
    let emb = embed_inputs(tape, frames, objects, mask, p, cfg)?;
    let o_hat = aggregate_objects(tape, &emb, p, cfg)?;
    let scales: Vec<Scale> = p.branches.iter().map(|b| b.scale).collect();
    let f_hat = msm_forward(tape, emb.frames, &cfg.msm_config()?, &p.msm, &scales)?;
    let (o_tilde, f_tilde) = temporal_process(tape, o_hat, &f_hat, &emb.mask, p, cfg)?;
    let (fused, attn) = post_fuse(tape, &f_tilde, o_tilde, &emb.mask, p, cfg)?;
    let probs = predict_risk(tape, &fused, p)?;
    Ok(ForwardVars {
        probs,
        attn: scales.into_iter().zip(attn).collect(),
    })
}

/// Forward pass over a record, with its features as tape constants.
pub fn forward_record<F: Real>(
    tape: &mut Tape<F>,
    record: &SequenceRecord,
    p: &MsfinParams<Var>,
    cfg: &MsfinConfig,
) -> Result<ForwardVars> {
    let frames = tape.constant(record.frames.cast());
    let objects = tape.constant(record.objects.cast());
    forward_vars(tape, frames, objects, &record.mask, p, cfg)
}

/// Per-frame probabilities and the exported post-fusion attention.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSeries<F: Real = f32> {
    pub probs: Vec<F>,
    /// `[heads, T, N]` per enabled scale.
    pub attn_by_scale: Vec<(Scale, Tensor<F>)>,
    pub object_mask: Vec<bool>,
}

/// Inference: a pure function of parameters and record.
pub fn forward<F: Real>(
    record: &SequenceRecord,
    params: &MsfinParams<Tensor<F>>,
    cfg: &MsfinConfig,
) -> Result<RiskSeries<F>> {
    let mut tape = Tape::new();
    let p = params.constants(&mut tape);
    let out = forward_record(&mut tape, record, &p, cfg)?;
    Ok(RiskSeries {
        probs: tape.value(out.probs).data().to_vec(),
        attn_by_scale: out.attn.iter().map(|&(s, w)| (s, tape.value(w).clone())).collect(),
        object_mask: record.mask.clone(),
    })
}
