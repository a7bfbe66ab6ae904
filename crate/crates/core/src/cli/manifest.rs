//! Simulation manifest: plain text, `key=value` pairs.
//!
//! Lines before the first `image=` line describe the cohort (`template`,
//! `template_labels`). Every `image=<index>` line describes one subject and
//! carries its `seed` and the paths of its `clean`, `deformation`, `bias`,
//! `observed` and `labels` files. Paths are relative to the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestImage {
    pub index: usize,
    pub seed: u64,
    pub clean: PathBuf,
    pub deformation: PathBuf,
    pub bias: PathBuf,
    pub observed: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub template: PathBuf,
    pub template_labels: PathBuf,
    pub images: Vec<ManifestImage>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "template={}\ntemplate_labels={}\n",
            self.template.display(),
            self.template_labels.display()
        );
        for m in &self.images {
            s.push_str(&format!(
                "image={} seed={} clean={} deformation={} bias={} observed={} labels={}\n",
                m.index,
                m.seed,
                m.clean.display(),
                m.deformation.display(),
                m.bias.display(),
                m.observed.display(),
                m.labels.display()
            ));
        }
        s
    }

    /// Parses `text`; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Self> {
        let err = |n: usize, msg: String| Error::Config(format!("{origin}:{n}: {msg}"));
        let mut header = BTreeMap::new();
        let mut images = Vec::new();
        for (n, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut pairs = BTreeMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| err(n, format!("expected key=value, got '{tok}'")))?;
                if pairs.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(err(n, format!("duplicate key '{k}'")));
                }
            }
            if !pairs.contains_key("image") {
                header.extend(pairs);
                continue;
            }
            let mut take = |k: &str| pairs.remove(k).ok_or_else(|| err(n, format!("missing '{k}'")));
            let index = take("image")?;
            let index = index.parse().map_err(|_| err(n, format!("bad image index '{index}'")))?;
            let seed = take("seed")?;
            let seed = seed.parse().map_err(|_| err(n, format!("bad seed '{seed}'")))?;
            images.push(ManifestImage {
                index,
                seed,
                clean: base.join(take("clean")?),
                deformation: base.join(take("deformation")?),
                bias: base.join(take("bias")?),
                observed: base.join(take("observed")?),
                labels: base.join(take("labels")?),
            });
            if let Some(k) = pairs.keys().next() {
                return Err(err(n, format!("unknown key '{k}'")));
            }
        }
        images.sort_by_key(|m| m.index);
        if images.iter().enumerate().any(|(i, m)| m.index != i) {
            return Err(Error::Config(format!("{origin}: image indices must be 0..{}", images.len())));
        }
        let mut take = |k: &str| {
            header.remove(k).map(|v| base.join(v)).ok_or_else(|| Error::Config(format!("{origin}: missing '{k}'")))
        };
        let template = take("template")?;
        let template_labels = take("template_labels")?;
        if let Some(k) = header.keys().next() {
            return Err(Error::Config(format!("{origin}: unknown key '{k}'")));
        }
        Ok(Manifest { template, template_labels, images })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), &path.display().to_string())
    }
}
