//! Sliding-window whole-volume prediction.

use hdan_tensor::Tensor;

use crate::error::{Error, Result};
use crate::network::{Mode, Network, ProbabilityMap, STAGES};
use crate::patching::{extract_volume, plan_patches, Fuser, PatchSpec};
use crate::volume_io::{LabelMap, MultiModalVolume, DEFAULT_CLASS_NAMES};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub patch: PatchSpec,
    /// Also fuse a full-resolution spatial attention map.
    pub trace_attention: bool,
    /// Attention site to export: 0 is the extractor's, `k` is stage `k`'s.
    pub attention_stage: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            patch: PatchSpec::default(),
            trace_attention: false,
            attention_stage: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: LabelMap,
    pub probabilities: ProbabilityMap,
    /// `[1, D, H, W]` fused spatial attention, when traced.
    pub attention: Option<Tensor>,
}

/// Class names for `n` classes: the tissue names when `n` matches them.
pub fn class_names(n: usize) -> Vec<String> {
    if n == DEFAULT_CLASS_NAMES.len() {
        DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|c| format!("class{c}")).collect()
    }
}

/// Nearest-neighbour upsampling of `[1, d, h, w]` by an integer factor.
fn upsample_nearest(map: &Tensor, factor: usize) -> Result<Tensor> {
    let s = map.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let src = map.data();
    let mut out = Vec::with_capacity(od * oh * ow);
    for z in 0..od {
        for y in 0..oh {
            let row = ((z / factor) * h + y / factor) * w;
            out.extend((0..ow).map(|x| src[row + x / factor]));
        }
    }
    Ok(Tensor::from_vec(&[1, od, oh, ow], out)?)
}

fn check(net: &Network, vol: &MultiModalVolume, cfg: &InferenceConfig) -> Result<()> {
    let mut shape = vec![1, vol.modalities()];
    shape.extend_from_slice(&cfg.patch.patch_size);
    net.check_input(&shape)?;
    if cfg.trace_attention {
        if cfg.attention_stage > STAGES {
            return Err(Error::InvalidConfig(format!(
                "attention stage must be in 0..={STAGES}, got {}",
                cfg.attention_stage
            )));
        }
        if !net.config().enable_sa {
            return Err(Error::InvalidConfig(
                "spatial attention is disabled in this network".into(),
            ));
        }
    }
    Ok(())
}

/// Predict every voxel of `vol`, processing patches in grid order.
pub fn predict_volume(
    net: &Network,
    vol: &MultiModalVolume,
    cfg: &InferenceConfig,
) -> Result<Prediction> {
    let grid = plan_patches(vol.dims(), cfg.patch)?;
    let order: Vec<usize> = (0..grid.len()).collect();
    predict_in_order(net, vol, cfg, &order)
}

/// As [`predict_volume`], visiting grid entries in `order`, which must be a
/// permutation of the grid indices. The result does not depend on it.
pub fn predict_in_order(
    net: &Network,
    vol: &MultiModalVolume,
    cfg: &InferenceConfig,
    order: &[usize],
) -> Result<Prediction> {
    check(net, vol, cfg)?;
    let grid = plan_patches(vol.dims(), cfg.patch)?;
    let classes = net.config().num_classes;
    let mut probs = Fuser::new(&grid, classes, vol.spacing);
    let mut attention = cfg
        .trace_attention
        .then(|| Fuser::new(&grid, 1, vol.spacing));
    let patch = cfg.patch.patch_size;
    for (done, &i) in order.iter().enumerate() {
        let origin = *grid.origins.get(i).ok_or_else(|| {
            Error::GridMismatch(format!("patch index {i} outside a grid of {}", grid.len()))
        })?;
        let x = extract_volume(vol, origin, patch)?;
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let rec = net.record(x.reshape(&shape)?, Mode::Eval, false)?;
        let p = rec.probabilities();
        probs.add(i, p.reshape(&[classes, patch[0], patch[1], patch[2]])?)?;
        if let Some(fuser) = attention.as_mut() {
            let map = rec.spatial_map(cfg.attention_stage).ok_or_else(|| {
                Error::InvalidConfig("no spatial attention at the requested stage".into())
            })?;
            let s = map.shape();
            let coarse = map.clone().reshape(&[1, s[2], s[3], s[4]])?;
            fuser.add(i, upsample_nearest(&coarse, 1 << cfg.attention_stage)?)?;
        }
        log::debug!("patch {}/{} at {origin:?}", done + 1, grid.len());
    }
    let probabilities = probs.finish()?;
    let labels = LabelMap::new(
        probabilities.argmax(),
        vol.dims(),
        class_names(classes),
        vol.spacing,
    )?;
    Ok(Prediction {
        labels,
        probabilities,
        attention: attention.map(Fuser::finish_tensor).transpose()?,
    })
}
