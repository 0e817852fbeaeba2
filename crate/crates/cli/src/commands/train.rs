use hdan::network::{Ablation, Network, NetworkConfig};
use hdan::patching::PatchSpec;
use hdan::training::{
    self, load_dataset, read_manifest, Checkpoint, ExperimentConfig, CHECKPOINT_FILE,
};
use hdan::Error;

use super::{create_dir, label_options};
use crate::args::{Preset, TrainArgs};
use crate::settings::Provenance;
use crate::Failure;

/// Resolved configuration written next to the checkpoint.
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
/// State from before a diverged epoch.
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

fn resolve(a: &TrainArgs) -> Result<(ExperimentConfig, Provenance), Failure> {
    let (mut cfg, file) = match &a.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            (cfg, Some(table))
        }
        None => (ExperimentConfig::default(), None),
    };
    let mut prov = Provenance::new(file, "file");
    if let Some(preset) = a.network {
        cfg.network = match preset {
            Preset::Default => NetworkConfig::default(),
            Preset::Tiny => NetworkConfig::tiny(),
        };
        prov.flag("network");
    }
    for &component in &a.ablate {
        let ablation = Ablation::from(component);
        cfg.network = cfg.network.clone().ablate(ablation);
        prov.flag(match ablation {
            Ablation::DenseUp => "network.enable_dense_up",
            Ablation::Ca => "network.enable_ca",
            Ablation::Sa => "network.enable_sa",
        });
    }
    let t = &mut cfg.training;
    if let Some(v) = a.epochs {
        t.max_epochs = v;
        prov.flag("training.max_epochs");
    }
    if let Some(v) = a.lr {
        t.initial_lr = v;
        prov.flag("training.initial_lr");
    }
    if let Some(v) = a.seed {
        t.seed = v;
        prov.flag("training.seed");
    }
    if let Some(v) = a.patches_per_volume {
        t.patches_per_volume_per_epoch = v;
        prov.flag("training.patches_per_volume_per_epoch");
    }
    if a.patch.is_some() || a.stride.is_some() {
        let patch = a.patch.map_or(t.patch.patch_size, |p| [p; 3]);
        let stride = match a.stride {
            Some(s) => [s; 3],
            None => [0, 1, 2].map(|i| t.patch.stride[i].min(patch[i])),
        };
        t.patch = PatchSpec::new(patch, stride)?;
        prov.flag("training.patch");
    }
    if let Some(d) = &a.data {
        cfg.data.manifest = Some(d.clone());
        prov.flag("data.manifest");
    }
    cfg.validate()?;
    Ok((cfg, prov))
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let (cfg, prov) = resolve(a)?;
    eprintln!("settings (flag > file > default):\n{}", prov.report(&cfg));
    let manifest =
        cfg.data.manifest.clone().ok_or_else(|| {
            Failure::usage("no training data: pass --data or set [data].manifest")
        })?;
    let dataset = load_dataset(&read_manifest(&manifest)?, &label_options(&a.labels)?)?;
    log::info!(
        "{} training subject(s) from {}",
        dataset.len(),
        manifest.display()
    );
    create_dir(&a.out)?;
    let config_path = a.out.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml_string()).map_err(|e| Failure::io(&config_path, e))?;

    let checkpoint = a.out.join(CHECKPOINT_FILE);
    let result = if a.resume {
        let mut ckpt = Checkpoint::load(&checkpoint)?;
        if a.epochs.is_some() || a.config.is_some() {
            ckpt.config.max_epochs = cfg.training.max_epochs;
        }
        log::info!(
            "resuming after epoch {} of {}",
            ckpt.epoch,
            ckpt.config.max_epochs
        );
        training::resume(ckpt, &dataset, Some(&a.out))
    } else {
        let net = Network::build(cfg.network.clone(), cfg.training.seed)?;
        log::info!("{} trainable parameters", net.parameter_count());
        training::train(net, &dataset, cfg.training.clone(), Some(&a.out))
    };
    match result {
        Ok(done) => {
            let last = done.history.last().map_or(f64::NAN, |r| r.mean_loss);
            println!(
                "trained {} epoch(s), final mean loss {last:.6}; checkpoint {}",
                done.epoch,
                checkpoint.display()
            );
            Ok(())
        }
        Err(Error::DivergenceDetected { epoch, last_good }) => {
            let mut message = format!("training diverged in epoch {epoch}");
            if let Some(good) = last_good {
                let path = a.out.join(LAST_GOOD_FILE);
                good.save(&path)?;
                message.push_str(&format!("; state before it saved to {}", path.display()));
            }
            Err(Failure::runtime(message))
        }
        Err(e) => Err(e.into()),
    }
}
