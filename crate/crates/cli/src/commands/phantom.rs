use std::path::PathBuf;

use hdan::training::{write_manifest, ManifestEntry};
use hdan::volume_io::{
    generate_phantom, path_with_format, save_labelmap, save_volume, LabelMapping, PhantomSpec,
    VolumeFormat,
};

use super::create_dir;
use crate::args::PhantomArgs;
use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn phantom(a: &PhantomArgs) -> Result<(), Failure> {
    if a.count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    let spec = |i: usize| PhantomSpec {
        size: [a.size; 3],
        contrast_delta: a.delta,
        noise_sigma: a.sigma,
        seed: a.seed + i as u64,
    };
    spec(0).validate()?;
    let format = VolumeFormat::from(a.format);
    for sub in ["images", "labels"] {
        create_dir(&a.out.join(sub))?;
    }
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let id = format!("phantom_{i:03}");
        let (mut vol, labels) = generate_phantom(&spec(i))?;
        vol.subject_id = id.clone();
        let image = path_with_format(&PathBuf::from("images").join(&id), format);
        let label = path_with_format(&PathBuf::from("labels").join(&id), format);
        save_volume(&vol, &a.out.join(&image), format)?;
        save_labelmap(
            &labels,
            &a.out.join(&label),
            format,
            Some(&LabelMapping::iseg()),
        )?;
        log::info!("{id}: seed {}", spec(i).seed);
        entries.push(ManifestEntry {
            subject_id: id,
            images: vec![image],
            labels: Some(label),
        });
    }
    let manifest = a.out.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    println!("wrote {} phantom(s) and {}", a.count, manifest.display());
    Ok(())
}
