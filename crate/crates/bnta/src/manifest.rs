//! JSON dataset manifests over PPM image files.
//!
//! A dataset directory holds `manifest.json` and an `images/` folder. Record
//! paths are relative to the manifest. Test pools are stored as one probe
//! record followed by the gallery records of each identity.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bnta_core::synth::{Dataset, TestPool};
use bnta_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};
use crate::ppm;

pub const FORMAT_VERSION: u32 = 1;
pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Probe,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub path: String,
    pub label: Option<usize>,
    pub domain: String,
    pub split: SplitTag,
}

/// Record count per split tag, declared in the header.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub probe: usize,
    pub gallery: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    /// Labels lie in `0..num_ids`.
    pub num_ids: usize,
    pub counts: SplitCounts,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    fn counted(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for r in &self.records {
            match r.split {
                SplitTag::Train => c.train += 1,
                SplitTag::Probe => c.probe += 1,
                SplitTag::Gallery => c.gallery += 1,
            }
        }
        c
    }

    /// Domain names in order of first appearance.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.domain) {
                out.push(r.domain.clone());
            }
        }
        out
    }
}

fn image_name(index: usize) -> String {
    format!("images/{index:06}.ppm")
}

fn write_dataset(dir: &Path, manifest: &DatasetManifest, images: &[Tensor]) -> Result<PathBuf> {
    for (record, img) in manifest.records.iter().zip(images) {
        ppm::save(img, &dir.join(&record.path))?;
    }
    let path = dir.join(FILE_NAME);
    error::write(&path, &serde_json::to_vec_pretty(manifest)?)?;
    Ok(path)
}

/// Store a labelled training set; `domain_names[d]` names domain index `d`.
pub fn save_train(dir: &Path, data: &Dataset, domain_names: &[String]) -> Result<PathBuf> {
    let (height, width) = image_size(&data.images)?;
    let records = (0..data.len())
        .map(|i| {
            let domain = domain_names
                .get(data.domains[i])
                .cloned()
                .ok_or_else(|| Error::Config(format!("no name for domain {}", data.domains[i])))?;
            Ok(ImageRecord {
                path: image_name(i),
                label: Some(data.labels[i]),
                domain,
                split: SplitTag::Train,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        height,
        width,
        num_ids: data.num_ids,
        counts: SplitCounts {
            train: data.len(),
            ..SplitCounts::default()
        },
        records,
    };
    write_dataset(dir, &manifest, &data.images)
}

/// Store a test pool: the first view of each identity is its probe, the
/// rest are gallery images.
pub fn save_test(dir: &Path, pool: &TestPool, domain: &str) -> Result<PathBuf> {
    let (height, width) = image_size(&pool.images)?;
    let records: Vec<ImageRecord> = (0..pool.images.len())
        .map(|i| ImageRecord {
            path: image_name(i),
            label: Some(pool.labels[i]),
            domain: domain.into(),
            split: if i % pool.views == 0 { SplitTag::Probe } else { SplitTag::Gallery },
        })
        .collect();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        height,
        width,
        num_ids: pool.num_ids,
        counts: SplitCounts {
            train: 0,
            probe: pool.num_ids,
            gallery: pool.images.len() - pool.num_ids,
        },
        records,
    };
    write_dataset(dir, &manifest, &pool.images)
}

fn image_size(images: &[Tensor]) -> Result<(usize, usize)> {
    match images.first().map(Tensor::shape) {
        Some(&[3, h, w]) => Ok((h, w)),
        other => Err(Error::Config(format!("expected [3, H, W] images, got {other:?}"))),
    }
}

/// Parse a manifest and check its header, labels and files.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let fail = |msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let manifest: DatasetManifest =
        serde_json::from_slice(&error::read(path)?).map_err(|e| fail(format!("invalid JSON: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(fail(format!(
            "format version {}, this tool reads version {FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    if manifest.counted() != manifest.counts {
        return Err(fail(format!(
            "header declares {:?} but the records give {:?}",
            manifest.counts,
            manifest.counted()
        )));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    for r in &manifest.records {
        if let Some(l) = r.label.filter(|&l| l >= manifest.num_ids) {
            return Err(fail(format!("label {l} of {} outside 0..{}", r.path, manifest.num_ids)));
        }
        let file = root.join(&r.path);
        if !file.is_file() {
            return Err(fail(format!("missing image file {}", file.display())));
        }
    }
    Ok(manifest)
}

fn load_images(path: &Path, manifest: &DatasetManifest, records: &[&ImageRecord]) -> Result<Vec<Tensor>> {
    let root = path.parent().unwrap_or(Path::new("."));
    records
        .iter()
        .map(|r| {
            let file = root.join(&r.path);
            let img = ppm::load(&file)?;
            if img.shape() != [3, manifest.height, manifest.width] {
                return Err(Error::format(
                    &file,
                    format!("image is {:?}, manifest declares 3x{}x{}", img.shape(), manifest.height, manifest.width),
                ));
            }
            Ok(img)
        })
        .collect()
}

fn require_label(path: &Path, r: &ImageRecord) -> Result<usize> {
    r.label.ok_or_else(|| Error::Manifest {
        path: path.to_path_buf(),
        msg: format!("{} has no label", r.path),
    })
}

/// Training records as a labelled dataset.
pub fn load_train(path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(path)?;
    let domains = manifest.domains();
    let records: Vec<&ImageRecord> = manifest.records.iter().filter(|r| r.split == SplitTag::Train).collect();
    if records.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            msg: "no training records".into(),
        });
    }
    let labels = records.iter().map(|r| require_label(path, r)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images: load_images(path, &manifest, &records)?,
        labels,
        domains: records
            .iter()
            .map(|r| domains.iter().position(|d| *d == r.domain).unwrap_or(0))
            .collect(),
        num_ids: manifest.num_ids,
    })
}

/// Probe and gallery records as a test pool. Every identity needs one
/// probe and the same number of gallery images; labels are remapped to
/// `0..identities` in ascending order.
pub fn load_test(path: &Path) -> Result<TestPool> {
    let manifest = load_manifest(path)?;
    let fail = |msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let mut by_id: BTreeMap<usize, (Vec<&ImageRecord>, Vec<&ImageRecord>)> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| r.split != SplitTag::Train) {
        let entry = by_id.entry(require_label(path, r)?).or_default();
        if r.split == SplitTag::Probe {
            entry.0.push(r);
        } else {
            entry.1.push(r);
        }
    }
    let Some(gallery_views) = by_id.values().next().map(|(_, g)| g.len()) else {
        return Err(fail("no probe or gallery records".into()));
    };
    if by_id.len() < 2 {
        return Err(fail("a test pool needs at least 2 identities".into()));
    }
    let mut ordered = Vec::new();
    for (id, (probe, gallery)) in &by_id {
        if probe.len() != 1 || gallery.len() != gallery_views || gallery_views == 0 {
            return Err(fail(format!(
                "identity {id} has {} probe and {} gallery images; expected 1 and {gallery_views} (at least 1)",
                probe.len(),
                gallery.len()
            )));
        }
        ordered.extend(probe.iter().chain(gallery));
    }
    let views = gallery_views + 1;
    Ok(TestPool {
        images: load_images(path, &manifest, &ordered)?,
        labels: (0..by_id.len()).flat_map(|k| std::iter::repeat_n(k, views)).collect(),
        views,
        num_ids: by_id.len(),
    })
}
