use std::path::PathBuf;

use hdan::inference::{predict_volume, InferenceConfig};
use hdan::network::{read_container, Network};
use hdan::patching::PatchSpec;
use hdan::training::ExperimentConfig;
use hdan::volume_io::{
    load_pair, normalize, path_with_format, save_labelmap, save_volume, LabelMapping,
    MultiModalVolume, VolumeFormat,
};

use super::create_dir;
use crate::args::PredictArgs;
use crate::image::{render_slices, resolve_slices};
use crate::settings::{differences, Provenance};
use crate::Failure;

#[derive(serde::Serialize)]
struct Resolved {
    inference: InferenceConfig,
}

pub fn predict(a: &PredictArgs) -> Result<(), Failure> {
    let container = read_container(&a.checkpoint)?;
    let trained_patch: Option<PatchSpec> = container
        .meta
        .get("training")
        .and_then(|t| t.get("patch"))
        .and_then(|p| serde_json::from_value(p.clone()).ok());
    let net = Network::from_container(container)?;
    if let Some(path) = &a.config {
        let expected = ExperimentConfig::load(path)?.network;
        let diff = differences(&expected, net.config());
        if !diff.is_empty() {
            return Err(Failure::usage(format!(
                "{} does not describe the network in {} ({})",
                path.display(),
                a.checkpoint.display(),
                diff.join("; ")
            )));
        }
    }

    let base = trained_patch.unwrap_or_default();
    let stored = trained_patch.map(|patch| {
        let mut inference = toml::Table::new();
        inference.insert(
            "patch".into(),
            toml::Value::Table(toml::Table::try_from(patch).expect("patch serializes")),
        );
        toml::Table::from_iter([("inference".to_string(), toml::Value::Table(inference))])
    });
    let mut prov = Provenance::new(stored, "checkpoint");
    let mut patch = base;
    if let Some(p) = a.patch {
        patch.patch_size = [p; 3];
        prov.flag("inference.patch.patch_size");
    }
    match a.stride {
        Some(s) => {
            patch.stride = [s; 3];
            prov.flag("inference.patch.stride");
        }
        None => patch.stride = [0, 1, 2].map(|i| base.stride[i].min(patch.patch_size[i])),
    }
    patch.validate()?;
    let cfg = InferenceConfig {
        patch,
        trace_attention: a.attention,
        attention_stage: a.attention_stage,
    };
    prov.flag("inference.trace_attention");
    prov.flag("inference.attention_stage");
    let report = prov.report(&Resolved {
        inference: cfg.clone(),
    });
    eprintln!("settings (flag > checkpoint > default):\n{report}");

    let paths: Vec<&std::path::Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    let vol = normalize(&load_pair(&paths)?)?;
    let id = vol.subject_id.clone();
    log::info!("{id}: {:?} voxels", vol.dims());
    let pred = predict_volume(&net, &vol, &cfg)?;

    let classes = net.config().num_classes;
    let mapping = match &a.label_map {
        Some(text) => LabelMapping::parse(text)?,
        None if classes == LabelMapping::iseg().entries.len() => LabelMapping::iseg(),
        None => LabelMapping::identity(&pred.labels.class_names),
    };
    create_dir(&a.out)?;
    let format = VolumeFormat::from(a.format);
    let labels_path = path_with_format(&a.out.join(&id), format);
    save_labelmap(&pred.labels, &labels_path, format, Some(&mapping))?;
    let hist = pred.labels.histogram();
    let counts: Vec<String> = pred
        .labels
        .class_names
        .iter()
        .zip(&hist)
        .map(|(n, c)| format!("{n} {c}"))
        .collect();
    println!("{}: {}", labels_path.display(), counts.join(", "));

    if let Some(map) = pred.attention {
        let dims = vol.dims();
        let slices = resolve_slices(&a.slice, dims)?;
        let attention = MultiModalVolume::new(map, vol.spacing, format!("{id}_attention"))?;
        let volume_path = path_with_format(&a.out.join(&attention.subject_id), format);
        save_volume(&attention, &volume_path, format)?;
        let png_dir = a.out.join(format!("{id}_attention_png"));
        let written = render_slices(attention.data.data(), dims, &slices, 0.0, 1.0, &png_dir)?;
        println!(
            "{}: attention stage {}; {} slice image(s) in {}",
            volume_path.display(),
            a.attention_stage,
            written.len(),
            png_dir.display()
        );
    }
    Ok(())
}
