//! End-to-end model: encoders, alignment, knowledge path, cross-modal
//! fusion, and heads, with a single explicit backward pass threading the
//! whole pipeline.
//!
//! The forward path is: encode image and question; align learnable
//! queries against both (with the contrastive objective on the result);
//! embed the graph nodes, mix them with graph attention, retrieve
//! question-conditioned knowledge, and normalize it; normalize the query
//! and text streams; run the stacked cross-modal blocks; fuse the four
//! streams; classify, and on open-ended samples score the auxiliary
//! decoder. Encoder outputs and node features are frozen, so their
//! gradients stop at the module boundaries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    self, contrastive_backward, contrastive_loss, qqformer_backward, qqformer_forward,
    AlignConfig, ContrastiveCache, ContrastiveConfig, QqFormerCache, SimilarityReduce,
};
use crate::config::RunConfig;
use crate::encoders::{Encoders, TokenKind, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::fusion::{
    cmm_stack, cmm_stack_backward, fuse_tripartite, fuse_tripartite_backward, init_block_params,
    BlockCache, CmmStreams, FusionWeights,
};
use crate::heads::{
    self, aux_loss, aux_loss_backward, classification_loss, classification_loss_backward,
    classify, classify_backward, total_loss, AuxCache, ClassifyCache, QuestionType,
};
use crate::knowledge::{
    build_adjacency, gat_stack_backward, gat_stack_forward, knowledge_retrieve,
    knowledge_retrieve_backward, AdjacencyMatrix, GatCache, KnowledgeGraph, RetrieveCache,
};
use crate::numerics::{layer_norm, layer_norm_backward, LayerNormCache};
use crate::params::ModelParams;
use crate::synthetic::VqaSample;
use crate::tensor::Tensor;

pub struct Model {
    pub cfg: RunConfig,
    pub params: ModelParams,
    pub encoders: Encoders,
    pub graph: KnowledgeGraph,
    pub adj: AdjacencyMatrix,
    pub vocab: Vocab,
    /// Frozen node feature matrix (N_v, d).
    pub node_features: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub total: f64,
    pub cls: f64,
    pub vtc: f64,
    pub aux: f64,
}

pub struct ForwardCache {
    t_seq: Tensor,
    t_summaries: Tensor,
    z_f: Tensor,
    qq: QqFormerCache,
    con: ContrastiveCache,
    kge: Option<KgeCache>,
    ln_z: Vec<LayerNormCache>,
    ln_t: Vec<LayerNormCache>,
    streams_out: Vec<CmmStreams>,
    blocks: Vec<Vec<BlockCache>>,
    cls: ClassifyCache,
    aux: AuxCache,
    logits: Tensor,
    answers: Vec<usize>,
    weights: FusionWeights,
    pub losses: Losses,
}

struct KgeCache {
    gat: Vec<GatCache>,
    retr: RetrieveCache,
    ln_k: Vec<LayerNormCache>,
}

impl Model {
    /// Build a model with freshly initialized parameters. The vocabulary
    /// must already contain the graph labels (see synthetic::build_vocab).
    pub fn new(cfg: RunConfig, graph: KnowledgeGraph, mut vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        graph.validate()?;
        let adj = build_adjacency(&graph)?;
        let encoders = Encoders::new(
            cfg.d,
            cfg.image_vocab,
            cfg.text_vocab,
            cfg.answer_vocab,
            cfg.max_len(),
            cfg.seed,
        );
        let node_features = crate::encoders::embed_kg_nodes(&graph, &mut vocab, &encoders)?;
        let mut params = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 0x51);
        alignment::init_params(&mut params, cfg.d, cfg.l_q, cfg.qqformer_layers, &mut rng);
        crate::knowledge::init_params(&mut params, cfg.d, cfg.gat_layers);
        init_block_params(&mut params, cfg.num_blocks, cfg.d, cfg.ssm_state, &mut rng);
        params.insert("cmir.ln_z.gain", Tensor::full(&[cfg.d], 1.0));
        params.insert("cmir.ln_z.bias", Tensor::zeros(&[cfg.d]));
        params.insert("cmir.ln_t.gain", Tensor::full(&[cfg.d], 1.0));
        params.insert("cmir.ln_t.bias", Tensor::zeros(&[cfg.d]));
        heads::init_classifier_params(&mut params, cfg.d, cfg.num_answers, &mut rng);
        let l_f = cfg.l_q + cfg.question_len;
        heads::init_aux_params(&mut params, cfg.d, l_f, cfg.answer_vocab, &mut rng);
        Ok(Self {
            cfg,
            params,
            encoders,
            graph,
            adj,
            vocab,
            node_features,
        })
    }

    fn fusion_weights(&self) -> Result<FusionWeights> {
        if self.cfg.disable_kge {
            FusionWeights::new(0.0, 0.0)
        } else {
            FusionWeights::new(self.cfg.eta, self.cfg.theta)
        }
    }

    pub fn forward(&self, batch: &[VqaSample]) -> Result<ForwardCache> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let b = batch.len();
        let d = self.cfg.d;
        let images: Vec<TokenSequence> = batch
            .iter()
            .map(|s| TokenSequence::new(s.image.clone(), TokenKind::Image))
            .collect();
        let questions: Vec<TokenSequence> = batch
            .iter()
            .map(|s| TokenSequence::new(s.question.clone(), TokenKind::Question))
            .collect();
        let v = self.encoders.encode_image(&images)?;
        let t = self.encoders.encode_text(&questions)?;

        let align_cfg = AlignConfig {
            layers: self.cfg.qqformer_layers,
            residual_norm: self.cfg.residual_norm,
        };
        let (z_f, qq) = qqformer_forward(&self.params, &align_cfg, &t.sequence, &v.sequence)?;
        let con_cfg = ContrastiveConfig {
            temperature: self.cfg.temperature,
            reduce: SimilarityReduce::Max,
        };
        let (con_losses, con) = contrastive_loss(&z_f, &t.summary, &con_cfg)?;

        let l_t = t.sequence.shape()[1];
        let (k_norm, kge) = if self.cfg.disable_kge {
            (Tensor::zeros(&[b, l_t, d]), None)
        } else {
            let (fg, gat) = gat_stack_forward(
                &self.params,
                self.cfg.gat_layers,
                &self.node_features,
                &self.adj,
            )?;
            let (k_raw, retr) = knowledge_retrieve(
                self.params.get("kge.retr.wq"),
                self.params.get("kge.retr.wk"),
                self.params.get("kge.retr.wv"),
                &fg,
                &t.sequence,
            )?;
            let mut k_norm = Tensor::zeros(k_raw.shape());
            let mut ln_k = Vec::with_capacity(b);
            for i in 0..b {
                let (y, c) = layer_norm(
                    &k_raw.batch(i),
                    self.params.get("kge.norm.gain"),
                    self.params.get("kge.norm.bias"),
                );
                k_norm.set_batch(i, &y);
                ln_k.push(c);
            }
            (k_norm, Some(KgeCache { gat, retr, ln_k }))
        };

        let weights = self.fusion_weights()?;
        let l_f = self.cfg.l_q + self.cfg.question_len;
        let mut x_f = Tensor::zeros(&[b, l_f, d]);
        let mut ln_z = Vec::with_capacity(b);
        let mut ln_t = Vec::with_capacity(b);
        let mut streams_out = Vec::with_capacity(b);
        let mut blocks = Vec::with_capacity(b);
        for i in 0..b {
            let (zp, cz) = layer_norm(
                &z_f.batch(i),
                self.params.get("cmir.ln_z.gain"),
                self.params.get("cmir.ln_z.bias"),
            );
            let (tp, ct) = layer_norm(
                &t.sequence.batch(i),
                self.params.get("cmir.ln_t.gain"),
                self.params.get("cmir.ln_t.bias"),
            );
            ln_z.push(cz);
            ln_t.push(ct);
            let input = CmmStreams {
                z: zp,
                t_v: tp.clone(),
                k: k_norm.batch(i),
                t_k: tp,
            };
            let (out, caches) = cmm_stack(&self.params, self.cfg.num_blocks, &input)?;
            let fused = fuse_tripartite(&out, &weights)?;
            x_f.set_batch(i, &fused);
            streams_out.push(out);
            blocks.push(caches);
        }

        let (logits, cls) = classify(&self.params, &x_f)?;
        let answers: Vec<usize> = batch.iter().map(|s| s.answer_index).collect();
        let l_cls = classification_loss(&logits, &answers, self.cfg.class_loss)?;
        let qtypes: Vec<QuestionType> = batch.iter().map(|s| s.qtype).collect();
        let tokens: Vec<Vec<usize>> = batch.iter().map(|s| s.answer_tokens.clone()).collect();
        let (l_aux, aux) = aux_loss(&self.params, &x_f, &qtypes, &tokens)?;
        let total = total_loss(l_cls, con_losses.vtc, l_aux, self.cfg.alpha, self.cfg.beta)?;
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss: cls={l_cls} vtc={} aux={l_aux}",
                con_losses.vtc
            )));
        }
        Ok(ForwardCache {
            t_seq: t.sequence,
            t_summaries: t.summary,
            z_f,
            qq,
            con,
            kge,
            ln_z,
            ln_t,
            streams_out,
            blocks,
            cls,
            aux,
            logits,
            answers,
            weights,
            losses: Losses {
                total,
                cls: l_cls,
                vtc: con_losses.vtc,
                aux: l_aux,
            },
        })
    }

    /// Backward through the whole pipeline; gradients accumulate into
    /// `self.params`.
    pub fn backward(&mut self, cache: &ForwardCache) {
        let b = cache.z_f.shape()[0];
        let d = self.cfg.d;

        let dlogits =
            classification_loss_backward(&cache.logits, &cache.answers, self.cfg.class_loss);
        let mut dx_f = classify_backward(&mut self.params, &cache.cls, &dlogits);
        let dx_aux = aux_loss_backward(&mut self.params, &cache.aux, self.cfg.beta);
        dx_f.add_assign(&dx_aux);

        let l_t = cache.t_seq.shape()[1];
        let mut d_zf = Tensor::zeros(cache.z_f.shape());
        let mut d_k_norm = Tensor::zeros(&[b, l_t, d]);
        let gain_z = self.params.get("cmir.ln_z.gain").clone();
        let gain_t = self.params.get("cmir.ln_t.gain").clone();
        for i in 0..b {
            let d_fused = dx_f.batch(i);
            let d_out = fuse_tripartite_backward(&cache.streams_out[i], &cache.weights, &d_fused);
            let d_in = cmm_stack_backward(
                &mut self.params,
                self.cfg.num_blocks,
                &cache.blocks[i],
                &d_out,
            );
            let (dz, dgain_z, dbias_z) = layer_norm_backward(&cache.ln_z[i], &gain_z, &d_in.z);
            self.params.accumulate("cmir.ln_z.gain", &dgain_z);
            self.params.accumulate("cmir.ln_z.bias", &dbias_z);
            d_zf.set_batch(i, &dz);
            let mut dt = d_in.t_v.clone();
            dt.add_assign(&d_in.t_k);
            // text features are frozen; only the norm's affine learns
            let (_, dgain_t, dbias_t) = layer_norm_backward(&cache.ln_t[i], &gain_t, &dt);
            self.params.accumulate("cmir.ln_t.gain", &dgain_t);
            self.params.accumulate("cmir.ln_t.bias", &dbias_t);
            d_k_norm.set_batch(i, &d_in.k);
        }

        if let Some(kge) = &cache.kge {
            let gain_k = self.params.get("kge.norm.gain").clone();
            let mut d_k_raw = Tensor::zeros(d_k_norm.shape());
            for i in 0..b {
                let (dk, dgain, dbias) =
                    layer_norm_backward(&kge.ln_k[i], &gain_k, &d_k_norm.batch(i));
                self.params.accumulate("kge.norm.gain", &dgain);
                self.params.accumulate("kge.norm.bias", &dbias);
                d_k_raw.set_batch(i, &dk);
            }
            let wq = self.params.get("kge.retr.wq").clone();
            let wk = self.params.get("kge.retr.wk").clone();
            let wv = self.params.get("kge.retr.wv").clone();
            let mut dwq = Tensor::zeros(wq.shape());
            let mut dwk = Tensor::zeros(wk.shape());
            let mut dwv = Tensor::zeros(wv.shape());
            let (dfg, _dtext) = knowledge_retrieve_backward(
                &wq, &wk, &wv, &kge.retr, &d_k_raw, &mut dwq, &mut dwk, &mut dwv,
            );
            self.params.accumulate("kge.retr.wq", &dwq);
            self.params.accumulate("kge.retr.wk", &dwk);
            self.params.accumulate("kge.retr.wv", &dwv);
            // node features are frozen; the stack backward still
            // accumulates the GAT parameter grads
            let _ = gat_stack_backward(
                &mut self.params,
                self.cfg.gat_layers,
                &self.adj,
                &kge.gat,
                &dfg,
            );
        }

        let con_cfg = ContrastiveConfig {
            temperature: self.cfg.temperature,
            reduce: SimilarityReduce::Max,
        };
        let d_con = contrastive_backward(
            &cache.z_f,
            &cache.t_summaries,
            &con_cfg,
            &cache.con,
            self.cfg.alpha,
        );
        d_zf.add_assign(&d_con);

        let align_cfg = AlignConfig {
            layers: self.cfg.qqformer_layers,
            residual_norm: self.cfg.residual_norm,
        };
        qqformer_backward(&mut self.params, &align_cfg, &cache.qq, &d_zf);
        let _ = &cache.t_seq; // encoder outputs are frozen
    }

    /// Scalar loss of a batch; used by the finite-difference oracle.
    pub fn loss(&self, batch: &[VqaSample]) -> Result<f64> {
        Ok(self.forward(batch)?.losses.total)
    }

    /// Inference: argmax over classifier logits; the auxiliary head never
    /// runs.
    pub fn predict(&self, batch: &[VqaSample]) -> Result<Vec<usize>> {
        let images: Vec<TokenSequence> = batch
            .iter()
            .map(|s| TokenSequence::new(s.image.clone(), TokenKind::Image))
            .collect();
        let questions: Vec<TokenSequence> = batch
            .iter()
            .map(|s| TokenSequence::new(s.question.clone(), TokenKind::Question))
            .collect();
        let v = self.encoders.encode_image(&images)?;
        let t = self.encoders.encode_text(&questions)?;
        let align_cfg = AlignConfig {
            layers: self.cfg.qqformer_layers,
            residual_norm: self.cfg.residual_norm,
        };
        let (z_f, _) = qqformer_forward(&self.params, &align_cfg, &t.sequence, &v.sequence)?;
        let b = batch.len();
        let d = self.cfg.d;
        let l_t = t.sequence.shape()[1];
        let k_norm = if self.cfg.disable_kge {
            Tensor::zeros(&[b, l_t, d])
        } else {
            let (fg, _) = gat_stack_forward(
                &self.params,
                self.cfg.gat_layers,
                &self.node_features,
                &self.adj,
            )?;
            let (k_raw, _) = knowledge_retrieve(
                self.params.get("kge.retr.wq"),
                self.params.get("kge.retr.wk"),
                self.params.get("kge.retr.wv"),
                &fg,
                &t.sequence,
            )?;
            let mut k_norm = Tensor::zeros(k_raw.shape());
            for i in 0..b {
                let (y, _) = layer_norm(
                    &k_raw.batch(i),
                    self.params.get("kge.norm.gain"),
                    self.params.get("kge.norm.bias"),
                );
                k_norm.set_batch(i, &y);
            }
            k_norm
        };
        let weights = self.fusion_weights()?;
        let l_f = self.cfg.l_q + self.cfg.question_len;
        let mut x_f = Tensor::zeros(&[b, l_f, d]);
        for i in 0..b {
            let (zp, _) = layer_norm(
                &z_f.batch(i),
                self.params.get("cmir.ln_z.gain"),
                self.params.get("cmir.ln_z.bias"),
            );
            let (tp, _) = layer_norm(
                &t.sequence.batch(i),
                self.params.get("cmir.ln_t.gain"),
                self.params.get("cmir.ln_t.bias"),
            );
            let input = CmmStreams {
                z: zp,
                t_v: tp.clone(),
                k: k_norm.batch(i),
                t_k: tp,
            };
            let (out, _) = cmm_stack(&self.params, self.cfg.num_blocks, &input)?;
            x_f.set_batch(i, &fuse_tripartite(&out, &weights)?);
        }
        let (logits, _) = classify(&self.params, &x_f)?;
        Ok((0..b).map(|i| heads::argmax(logits.row(i))).collect())
    }
}
