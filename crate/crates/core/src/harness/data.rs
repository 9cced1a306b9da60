use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{bail, Error, Result};
use crate::frontend::{
    decode_wav, fit_frames, log_mel, read_feature_file, read_manifest, write_feature_file,
    write_manifest, ManifestEntry, MelConfig, Spectrogram, SynthSpec,
};
use crate::model::ModelConfig;

/// Hop assumed for feature files, which do not store it.
const FEATURE_HOP: f64 = 0.01;

/// A spectrogram and its class id.
pub type Labeled = (Spectrogram, usize);

/// Reads every manifest entry, fitting each grid to the model's frame count.
/// Paths are relative to `features_dir`, or to the manifest's directory.
pub fn load_manifest(manifest: &Path, features_dir: Option<&Path>, model: &ModelConfig) -> Result<Vec<Labeled>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        bail!(Data, "{}: manifest lists no samples", manifest.display());
    }
    let base = features_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    entries
        .par_iter()
        .map(|e| {
            if e.label_id >= model.num_classes {
                bail!(
                    Data,
                    "{}: label id {} of {} is not below num_classes {}",
                    manifest.display(),
                    e.label_id,
                    e.relative_path,
                    model.num_classes
                );
            }
            let path = base.join(&e.relative_path);
            let t = read_feature_file(&path)?;
            if t.rank() != 2 || t.shape()[1] != model.mel_bins {
                bail!(
                    Data,
                    "{}: features {:?} do not have {} mel bins",
                    path.display(),
                    t.shape(),
                    model.mel_bins
                );
            }
            Ok((Spectrogram::new(fit_frames(&t, model.frames)?, FEATURE_HOP)?, e.label_id))
        })
        .collect()
}

/// Writes `train` and `test` synthetic splits as feature files plus
/// `train.csv` / `test.csv`. Both come from one dataset: the first `n`
/// samples train, the next `test_n` test.
pub fn write_synthetic(out: &Path, spec: &SynthSpec, n: usize, test_n: usize) -> Result<(PathBuf, PathBuf)> {
    if n == 0 {
        bail!(Argument, "gen-synth needs at least one training sample");
    }
    let spec = SynthSpec {
        count: n + test_n,
        ..spec.clone()
    };
    let mut manifests = Vec::new();
    for (split, range) in [("train", 0..n), ("test", n..n + test_n)] {
        let dir = out.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let entries = range
            .into_par_iter()
            .map(|i| {
                let (s, label) = spec.sample(i)?;
                let rel = format!("{split}/{i:05}.mastf");
                write_feature_file(&out.join(&rel), &s.frames)?;
                Ok(ManifestEntry {
                    relative_path: rel,
                    label_id: label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let path = out.join(format!("{split}.csv"));
        write_manifest(&path, &entries)?;
        manifests.push(path);
    }
    let test = manifests.pop().expect("two splits");
    Ok((manifests.pop().expect("two splits"), test))
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

/// Converts every `.wav` below `wav_dir` to log-mel features under `out`.
/// The class of a file is the name of its parent directory; ids follow the
/// sorted class names, which are written to `labels.txt`. Returns the
/// manifest path.
pub fn featurize(wav_dir: &Path, out: &Path, mel: &MelConfig) -> Result<PathBuf> {
    let mut wavs = Vec::new();
    collect_wavs(wav_dir, &mut wavs)?;
    if wavs.is_empty() {
        bail!(Data, "{}: no .wav files found", wav_dir.display());
    }
    let class_of = |p: &Path| -> Result<String> {
        let parent = p.parent().filter(|d| *d != wav_dir);
        match parent.and_then(|d| d.file_name()).and_then(|n| n.to_str()) {
            Some(name) => Ok(name.to_string()),
            None => bail!(Data, "{}: cannot infer a label, put files in class directories", p.display()),
        }
    };
    let classes: BTreeSet<String> = wavs.iter().map(|p| class_of(p)).collect::<Result<_>>()?;
    let classes: Vec<String> = classes.into_iter().collect();
    let entries = wavs
        .par_iter()
        .map(|p| {
            let class = class_of(p)?;
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let wave = decode_wav(&bytes).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            let spec = log_mel(&wave, mel).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
            let rel = format!("{class}/{stem}.mastf");
            let dir = out.join(&class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_feature_file(&out.join(&rel), &spec.frames)?;
            Ok(ManifestEntry {
                relative_path: rel,
                label_id: classes.binary_search(&class).expect("class was collected"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = out.join("labels.txt");
    fs::write(&labels, classes.join("\n") + "\n").map_err(|e| Error::io(&labels, e))?;
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
