use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tbscreen_nn::layers::{self, BATCH_NORM_MOMENTUM};
use tbscreen_nn::{BnObservation, Graph, Mode, ParamStore, Real, Tensor, Var};

use super::config::{Modality, ModelConfig};
use crate::dsp::FeatureMap;
use crate::error::{CoreError, Result};

/// Iteration controls for the cross-modal exchange.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CmBcaSettings {
    pub heads: usize,
    pub dropout: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl CmBcaSettings {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            heads: cfg.heads,
            dropout: cfg.dropout,
            max_iters: cfg.cmbca_max_iters,
            tol: cfg.cmbca_tol,
        }
    }
}

/// Refined embeddings plus the attention record of every iteration.
pub struct CmBcaOutput {
    /// `[B, d]`
    pub tab: Var,
    /// `[B, d]`
    pub audio: Var,
    /// Iterations the loop ran (the largest per-sample count).
    pub iterations: usize,
    /// Iterations in which each sample was still being updated.
    pub sample_iterations: Vec<usize>,
    /// Attention nodes of the tabular update (tabular queries, audio keys).
    pub tab_attn: Vec<Var>,
    /// Attention nodes of the audio update (audio queries, tabular keys).
    pub audio_attn: Vec<Var>,
}

pub fn init_cmbca_side<T: Real>(ps: &mut ParamStore<T>, prefix: &str, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) {
    layers::init_mha(ps, &format!("{prefix}.mha"), d, rng);
    ps.init_layer_norm(&format!("{prefix}.ln1"), d);
    layers::init_ffn(ps, &format!("{prefix}.ffn"), d, d_ff, rng);
    ps.init_layer_norm(&format!("{prefix}.ln2"), d);
}

/// One attention block: `Z = LN(X + Drop(MHA(X, Y, Y)))`,
/// `X' = LN(Z + Drop(FFN(Z)))` on `[B, 1, d]` sequences.
fn exchange_block<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    x: Var,
    other: Var,
    s: &CmBcaSettings,
) -> Result<(Var, Var)> {
    let att = layers::mha(g, ps, &format!("{prefix}.mha"), x, other, other, s.heads)?;
    let a = g.dropout(att.out, s.dropout)?;
    let z = g.add(x, a)?;
    let z = layers::layer_norm(g, ps, &format!("{prefix}.ln1"), z)?;
    let f = layers::ffn(g, ps, &format!("{prefix}.ffn"), z)?;
    let f = g.dropout(f, s.dropout)?;
    let y = g.add(z, f)?;
    let y = layers::layer_norm(g, ps, &format!("{prefix}.ln2"), y)?;
    Ok((y, att.attn))
}

fn row_update_norms<T: Real>(new: &Tensor<T>, old: &Tensor<T>, rows: usize) -> Vec<f64> {
    let d = new.len() / rows.max(1);
    (0..rows)
        .map(|r| {
            new.data()[r * d..(r + 1) * d]
                .iter()
                .zip(&old.data()[r * d..(r + 1) * d])
                .map(|(&a, &b)| (a - b).as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Bidirectional cross-attention between the two embeddings.
///
/// Each vector is lifted to a length-1 sequence. Per iteration the tabular
/// side attends to the audio side, and the audio side attends to the
/// tabular state from the start of the iteration. A sample stops updating
/// once both of its update norms fall below `tol`; its last update is kept.
pub fn cm_bca<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    f_audio: Var,
    f_tab: Var,
    s: &CmBcaSettings,
) -> Result<CmBcaOutput> {
    let shape = g.value(f_tab).shape().to_vec();
    if shape.len() != 2 || g.value(f_audio).shape() != shape.as_slice() {
        return Err(CoreError::DimensionMismatch {
            expected: shape.iter().product(),
            got: g.value(f_audio).len(),
        });
    }
    let (b, d) = (shape[0], shape[1]);
    let mut t = g.reshape(f_tab, &[b, 1, d])?;
    let mut a = g.reshape(f_audio, &[b, 1, d])?;
    let mut active = vec![true; b];
    let mut sample_iterations = vec![0; b];
    let (mut tab_attn, mut audio_attn) = (Vec::new(), Vec::new());
    let mut iterations = 0;
    while iterations < s.max_iters && active.iter().any(|&x| x) {
        let (t_new, t_w) = exchange_block(g, ps, "cmbca.tab", t, a, s)?;
        let (a_new, a_w) = exchange_block(g, ps, "cmbca.audio", a, t, s)?;
        tab_attn.push(t_w);
        audio_attn.push(a_w);
        let dt = row_update_norms(g.value(t_new), g.value(t), b);
        let da = row_update_norms(g.value(a_new), g.value(a), b);
        let keep = active.clone();
        t = g.select_rows(&keep, t_new, t)?;
        a = g.select_rows(&keep, a_new, a)?;
        for i in 0..b {
            if active[i] {
                sample_iterations[i] += 1;
                if dt[i] < s.tol && da[i] < s.tol {
                    active[i] = false;
                }
            }
        }
        iterations += 1;
    }
    Ok(CmBcaOutput {
        tab: g.reshape(t, &[b, d])?,
        audio: g.reshape(a, &[b, d])?,
        iterations,
        sample_iterations,
        tab_attn,
        audio_attn,
    })
}

/// Graph nodes of one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    pub probs: Var,
    pub f_tab: Option<Var>,
    pub f_audio: Option<Var>,
    pub cmbca: Option<CmBcaOutput>,
}

/// Per-sample inference result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; 2],
    pub logits: [f64; 2],
    /// Per iteration, per head weight of the tabular-queries-audio attention.
    pub attn_tab_to_audio: Vec<Vec<f64>>,
    /// Per iteration, per head weight of the audio-queries-tabular attention.
    pub attn_audio_to_tab: Vec<Vec<f64>>,
    pub f_tab: Vec<f64>,
    pub f_audio: Vec<f64>,
    pub cmbca_iterations: usize,
}

impl Prediction {
    pub fn risk(&self) -> f64 {
        self.probs[1]
    }
}

/// Tabular branch, audio branch, cross-attention exchange and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    /// Audio channels forced to zero before the audio branch (ablation hook).
    pub zeroed_channels: Vec<usize>,
}

impl<T: Real> FusionModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = cfg.d;
        if cfg.uses_tabular() {
            ps.init_batch_norm("tab.bn", cfg.tab_dim);
            ps.init_dense("tab.fc", cfg.tab_dim, d, &mut rng);
        }
        if cfg.uses_audio() {
            let mut c_in = cfg.in_channels;
            for (i, (&c_out, &k)) in cfg.conv_channels.iter().zip(&cfg.kernels).enumerate() {
                ps.init_conv1d(&format!("audio.conv{}", i + 1), c_in, c_out, k, &mut rng);
                ps.init_batch_norm(&format!("audio.bn{}", i + 1), c_out);
                c_in = c_out;
            }
            ps.init_dense("audio.fc", cfg.flat_dim(), d, &mut rng);
        }
        let head_in = match cfg.modality {
            Modality::Fused => {
                init_cmbca_side(&mut ps, "cmbca.tab", d, cfg.d_ff, &mut rng);
                init_cmbca_side(&mut ps, "cmbca.audio", d, cfg.d_ff, &mut rng);
                2 * d
            }
            _ => d,
        };
        ps.init_dense("head.fc", head_in, 2, &mut rng);
        Ok(Self {
            cfg,
            params: ps,
            zeroed_channels: Vec::new(),
        })
    }

    pub fn cast<U: Real>(&self) -> FusionModel<U> {
        FusionModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            zeroed_channels: self.zeroed_channels.clone(),
        }
    }

    /// `[B, tab_dim] -> [B, d]`: batch norm, dense, ReLU.
    pub fn tabular_branch(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.value(x).shape();
        if s.len() != 2 || s[1] != self.cfg.tab_dim {
            return Err(CoreError::DimensionMismatch {
                expected: self.cfg.tab_dim,
                got: *s.last().unwrap_or(&0),
            });
        }
        let h = layers::batch_norm(g, &self.params, "tab.bn", x)?;
        let h = layers::dense(g, &self.params, "tab.fc", h)?;
        Ok(g.relu(h))
    }

    /// `[B, C, T] -> [B, d]`: three conv/BN/ReLU/pool blocks, flatten,
    /// dense, ReLU, dropout.
    pub fn audio_branch(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 3 || s[1] != self.cfg.in_channels || s[2] != self.cfg.in_frames {
            return Err(CoreError::InvalidConfig(format!(
                "audio input {s:?}, expected [B, {}, {}]",
                self.cfg.in_channels, self.cfg.in_frames
            )));
        }
        let mut h = x;
        for i in 1..=3 {
            h = layers::conv1d(g, &self.params, &format!("audio.conv{i}"), h)?;
            h = layers::batch_norm(g, &self.params, &format!("audio.bn{i}"), h)?;
            h = g.relu(h);
            h = g.max_pool2(h)?;
        }
        let h = g.reshape(h, &[s[0], self.cfg.flat_dim()])?;
        let h = layers::dense(g, &self.params, "audio.fc", h)?;
        let h = g.relu(h);
        Ok(g.dropout(h, self.cfg.dropout)?)
    }

    /// Concatenate (tabular first) and classify: `[B, 2d] -> [B, 2]`.
    pub fn fuse_classify(&self, g: &mut Graph<T>, f_tab: Var, f_audio: Var) -> Result<(Var, Var)> {
        let fused = g.concat(f_tab, f_audio)?;
        self.classify(g, fused)
    }

    fn classify(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let logits = layers::dense(g, &self.params, "head.fc", x)?;
        let probs = g.softmax(logits);
        Ok((logits, probs))
    }

    /// Full forward pass. Inputs not used by the configured modality may
    /// be `None`.
    pub fn forward(&self, g: &mut Graph<T>, audio: Option<Var>, tab: Option<Var>) -> Result<ForwardPass> {
        let need = |v: Option<Var>, what: &str| {
            v.ok_or_else(|| CoreError::InvalidConfig(format!("{what} input required by this model")))
        };
        match self.cfg.modality {
            Modality::Fused => {
                let ft = self.tabular_branch(g, need(tab, "tabular")?)?;
                let fa = self.audio_branch(g, need(audio, "audio")?)?;
                let ex = cm_bca(g, &self.params, fa, ft, &CmBcaSettings::from_config(&self.cfg))?;
                let (logits, probs) = self.fuse_classify(g, ex.tab, ex.audio)?;
                Ok(ForwardPass {
                    logits,
                    probs,
                    f_tab: Some(ex.tab),
                    f_audio: Some(ex.audio),
                    cmbca: Some(ex),
                })
            }
            Modality::TabularOnly => {
                let ft = self.tabular_branch(g, need(tab, "tabular")?)?;
                let (logits, probs) = self.classify(g, ft)?;
                Ok(ForwardPass {
                    logits,
                    probs,
                    f_tab: Some(ft),
                    f_audio: None,
                    cmbca: None,
                })
            }
            Modality::AudioOnly => {
                let fa = self.audio_branch(g, need(audio, "audio")?)?;
                let (logits, probs) = self.classify(g, fa)?;
                Ok(ForwardPass {
                    logits,
                    probs,
                    f_tab: None,
                    f_audio: Some(fa),
                    cmbca: None,
                })
            }
        }
    }

    pub fn audio_tensor(&self, maps: &[&FeatureMap]) -> Result<Tensor<T>> {
        let (c, t) = (self.cfg.in_channels, self.cfg.in_frames);
        let mut data = Vec::with_capacity(maps.len() * c * t);
        for m in maps {
            if m.n_channels != c || m.n_frames != t {
                return Err(CoreError::InvalidConfig(format!(
                    "feature map is {}x{}, model expects {c}x{t}",
                    m.n_channels, m.n_frames
                )));
            }
            let start = data.len();
            data.extend(m.data.iter().map(|&v| T::from_f32(v)));
            for &ch in &self.zeroed_channels {
                data[start + ch * t..start + (ch + 1) * t].fill(T::zero());
            }
        }
        Ok(Tensor::new(vec![maps.len(), c, t], data)?)
    }

    pub fn tab_tensor(&self, rows: &[&[f64]]) -> Result<Tensor<T>> {
        let d = self.cfg.tab_dim;
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(CoreError::DimensionMismatch {
                    expected: d,
                    got: r.len(),
                });
            }
            data.extend(r.iter().map(|&v| T::from_f64(v)));
        }
        Ok(Tensor::new(vec![rows.len(), d], data)?)
    }

    /// Builds graph inputs for a batch; unused modalities are skipped.
    pub fn inputs(
        &self,
        g: &mut Graph<T>,
        maps: &[&FeatureMap],
        tab: &[&[f64]],
    ) -> Result<(Option<Var>, Option<Var>)> {
        let audio = if self.cfg.uses_audio() {
            Some(g.input(self.audio_tensor(maps)?))
        } else {
            None
        };
        let tab = if self.cfg.uses_tabular() {
            Some(g.input(self.tab_tensor(tab)?))
        } else {
            None
        };
        Ok((audio, tab))
    }

    /// Inference-mode predictions for a batch.
    pub fn predict(&self, maps: &[&FeatureMap], tab: &[&[f64]]) -> Result<Vec<Prediction>> {
        let n = maps.len().max(tab.len());
        let mut g = Graph::new(Mode::Infer);
        let (a, t) = self.inputs(&mut g, maps, tab)?;
        let fp = self.forward(&mut g, a, t)?;
        let logits = g.value(fp.logits).clone();
        let probs = g.value(fp.probs).clone();
        let embed = |v: Option<Var>, r: usize| -> Vec<f64> {
            v.map(|v| g.value(v).row(r).iter().map(|x| x.as_f64()).collect())
                .unwrap_or_default()
        };
        let heads = self.cfg.heads;
        let attn = |nodes: &[Var], r: usize| -> Vec<Vec<f64>> {
            nodes
                .iter()
                .map(|&v| {
                    let w = g.attention_weights(v).expect("attention node");
                    w[r * heads..(r + 1) * heads].iter().map(|x| x.as_f64()).collect()
                })
                .collect()
        };
        Ok((0..n)
            .map(|r| Prediction {
                probs: [probs.row(r)[0].as_f64(), probs.row(r)[1].as_f64()],
                logits: [logits.row(r)[0].as_f64(), logits.row(r)[1].as_f64()],
                attn_tab_to_audio: fp.cmbca.as_ref().map(|c| attn(&c.tab_attn, r)).unwrap_or_default(),
                attn_audio_to_tab: fp.cmbca.as_ref().map(|c| attn(&c.audio_attn, r)).unwrap_or_default(),
                f_tab: embed(fp.f_tab, r),
                f_audio: embed(fp.f_audio, r),
                cmbca_iterations: fp.cmbca.as_ref().map_or(0, |c| c.sample_iterations[r]),
            })
            .collect())
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_observations(&mut self, observations: Vec<BnObservation<T>>) -> Result<()> {
        let m = T::from_f64(BATCH_NORM_MOMENTUM);
        for obs in observations {
            for (suffix, batch) in [("running_mean", &obs.mean), ("running_var", &obs.var)] {
                let running = self.params.by_name_mut(&format!("{}.{suffix}", obs.prefix))?;
                for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + (T::one() - m) * b;
                }
            }
        }
        Ok(())
    }
}
