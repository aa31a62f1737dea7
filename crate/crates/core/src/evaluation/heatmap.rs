use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tbscreen_nn::{Graph, Mode};

use super::ablation::registered_features;
use crate::bundle::ModelBundle;
use crate::data::Sample;
use crate::dsp::{ChannelGroup, ChannelLayout, FeatureMap};
use crate::error::{CoreError, Result};
use crate::fusion::FusionModel;
use crate::tabular::{feature_index, FEATURE_NAMES};

const BATCH: usize = 64;
/// Matches the variance floor inside the batch-norm layer.
const BN_EPS: f64 = 1e-5;
const CELL_PX: u32 = 12;

/// Per-sample input attribution by feature group, features × samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub features: Vec<String>,
    pub samples: Vec<String>,
    /// `values[feature][sample]`; each sample's column peaks at 1.
    pub values: Vec<Vec<f64>>,
    /// Samples with no gradient signal at all. Their column is uniform 1.
    pub uniform: Vec<bool>,
}

impl AttributionMap {
    pub fn feature_means(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "feature")?;
        for s in &self.samples {
            write!(w, ",{s}")?;
        }
        writeln!(w)?;
        for (name, row) in self.features.iter().zip(&self.values) {
            write!(w, "{name}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// One `CELL_PX` square per cell, features down, samples across.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (rows, cols) = (self.features.len() as u32, self.samples.len() as u32);
        if rows == 0 || cols == 0 {
            return Err(CoreError::Empty("empty attribution map".into()));
        }
        let (w, h) = (cols * CELL_PX, rows * CELL_PX);
        let mut pixels = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            let row = &self.values[(y / CELL_PX) as usize];
            for x in 0..w {
                pixels.extend(colormap(row[(x / CELL_PX) as usize]));
            }
        }
        let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w, h);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&pixels).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(())
    }
}

fn png_err(e: png::EncodingError) -> CoreError {
    CoreError::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

/// Dark purple through orange to pale yellow.
fn colormap(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 4.0], [120.0, 28.0, 109.0], [237.0, 105.0, 37.0], [252.0, 255.0, 164.0]];
    let t = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mix = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    [mix(0), mix(1), mix(2)]
}

/// Where a registered feature lives in the network inputs.
enum Source {
    TabColumn { position: usize, scale: f64 },
    AudioRows(Vec<usize>),
}

fn feature_sources(bundle: &ModelBundle, model: &FusionModel<f64>) -> Result<Vec<(String, Source)>> {
    let layout = ChannelLayout::new(&bundle.dsp);
    let mut out = Vec::new();
    for name in registered_features() {
        if let Some(col) = feature_index(name) {
            if !model.cfg.uses_tabular() || bundle.dropped_columns.contains(&col) {
                continue;
            }
            let position = (0..col).filter(|c| !bundle.dropped_columns.contains(c)).count();
            let var = model.params.by_name("tab.bn.running_var")?.data()[position];
            out.push((FEATURE_NAMES[col].to_string(), Source::TabColumn {
                position,
                scale: (var + BN_EPS).sqrt(),
            }));
        } else if let Some(group) = ChannelGroup::from_name(name) {
            if !model.cfg.uses_audio() {
                continue;
            }
            let range = layout.range(group);
            let rows: Vec<usize> = bundle
                .kept_channels
                .iter()
                .enumerate()
                .filter(|(_, c)| range.contains(c))
                .map(|(pos, _)| pos)
                .filter(|pos| !model.zeroed_channels.contains(pos))
                .collect();
            if !rows.is_empty() {
                out.push((group.name().to_string(), Source::AudioRows(rows)));
            }
        }
    }
    Ok(out)
}

/// Gradient attribution of the positive-class probability to each input
/// feature group, in inference mode.
///
/// A tabular column scores `|dp/dx| * sd`, with `sd` the first batch-norm
/// layer's running deviation, i.e. the gradient per standardized unit. An
/// acoustic group scores the mean `|dp/dx|` over its channels and frames,
/// whose inputs are already standardized. Each sample's column is then
/// divided by its maximum.
pub fn attribution_heatmap(bundle: &ModelBundle, samples: &[&Sample]) -> Result<AttributionMap> {
    let model: FusionModel<f64> = bundle.model.cast();
    let sources = feature_sources(bundle, &model)?;
    let mut raw = vec![Vec::with_capacity(samples.len()); sources.len()];
    for chunk in samples.chunks(BATCH) {
        let maps: Vec<FeatureMap> = if model.cfg.uses_audio() {
            chunk.iter().map(|s| bundle.audio_input(&s.audio)).collect()
        } else {
            Vec::new()
        };
        let tabs: Vec<Vec<f64>> = if model.cfg.uses_tabular() {
            chunk
                .iter()
                .map(|s| Ok(bundle.enhance(&s.record)?.vector()))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let map_refs: Vec<&FeatureMap> = maps.iter().collect();
        let tab_refs: Vec<&[f64]> = tabs.iter().map(Vec::as_slice).collect();

        let mut g = Graph::new(Mode::Infer);
        let audio = if model.cfg.uses_audio() {
            Some(g.tracked_input(model.audio_tensor(&map_refs)?))
        } else {
            None
        };
        let tab = if model.cfg.uses_tabular() {
            Some(g.tracked_input(model.tab_tensor(&tab_refs)?))
        } else {
            None
        };
        let fp = model.forward(&mut g, audio, tab)?;
        // rows are independent in inference mode, so one backward pass
        // yields every sample's own gradient
        let pick: Vec<f64> = (0..chunk.len()).flat_map(|_| [0.0, 1.0]).collect();
        let out = g.weighted_sum(fp.probs, pick)?;
        let grads = g.backward(out)?;
        let (c, t) = (model.cfg.in_channels, model.cfg.in_frames);
        let tab_dim = model.cfg.tab_dim;
        for b in 0..chunk.len() {
            for (k, (_, src)) in sources.iter().enumerate() {
                let v = match src {
                    Source::TabColumn { position, scale } => {
                        let gt = grads.wrt(tab.expect("tabular input")).map(|x| x.data());
                        gt.map_or(0.0, |d| d[b * tab_dim + position].abs() * scale)
                    }
                    Source::AudioRows(rows) => {
                        let ga = grads.wrt(audio.expect("audio input")).map(|x| x.data());
                        ga.map_or(0.0, |d| {
                            let sum: f64 = rows
                                .iter()
                                .flat_map(|&r| &d[(b * c + r) * t..(b * c + r + 1) * t])
                                .map(|x| x.abs())
                                .sum();
                            sum / (rows.len() * t) as f64
                        })
                    }
                };
                raw[k].push(v);
            }
        }
    }

    let mut uniform = Vec::with_capacity(samples.len());
    for s in 0..samples.len() {
        let peak = raw.iter().map(|row| row[s]).fold(0.0f64, f64::max);
        let flat = !(peak > 0.0 && peak.is_finite());
        for row in raw.iter_mut() {
            row[s] = if flat { 1.0 } else { row[s] / peak };
        }
        uniform.push(flat);
    }
    Ok(AttributionMap {
        features: sources.into_iter().map(|(n, _)| n).collect(),
        samples: samples.iter().map(|s| s.record.patient_id.clone()).collect(),
        values: raw,
        uniform,
    })
}
