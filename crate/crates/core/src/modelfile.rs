//! Single-file model persistence: a text preamble of named sections (config
//! key=value pairs, label sets, vocabularies) followed by the parameter
//! container.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{load_params, save_params, ParamStore};

const MODEL_MAGIC: &str = "RAW2UD-MODEL";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a model file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported model version {found} (expected {MODEL_VERSION})")]
    Version { path: String, found: u32 },
    #[error("{path}: expected a `{expected}` model, found `{found}`")]
    WrongKind { path: String, expected: String, found: String },
    #[error("{path}: malformed model file: {message}")]
    Malformed { path: String, message: String },
    #[error("{path}: parameter container: {source}")]
    Params {
        path: String,
        #[source]
        source: crate::autodiff::ContainerError,
    },
    #[error("{path}: missing section `{name}`")]
    MissingSection { path: String, name: String },
    #[error("{path}: missing config key `{key}`")]
    MissingKey { path: String, key: String },
}

pub struct ModelFile {
    pub kind: String,
    pub sections: BTreeMap<String, Vec<String>>,
    pub store: ParamStore,
    path: String,
}

impl ModelFile {
    pub fn section(&self, name: &str) -> Result<&[String], ModelFileError> {
        self.sections
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| ModelFileError::MissingSection {
                path: self.path.clone(),
                name: name.to_string(),
            })
    }

    /// Parse a `key=value` section into a map.
    pub fn config(&self, name: &str) -> Result<BTreeMap<String, String>, ModelFileError> {
        let mut map = BTreeMap::new();
        for line in self.section(name)? {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        Ok(map)
    }

    pub fn config_value<T: std::str::FromStr>(
        cfg: &BTreeMap<String, String>,
        key: &str,
        path: &str,
    ) -> Result<T, ModelFileError> {
        cfg.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ModelFileError::MissingKey {
                path: path.to_string(),
                key: key.to_string(),
            })
    }

    pub fn path(&self) -> &str {
        &self.path
    }
}

pub fn write_model(
    path: &Path,
    kind: &str,
    sections: &[(&str, Vec<String>)],
    store: &ParamStore,
) -> Result<(), ModelFileError> {
    let mut out = String::new();
    out.push_str(&format!("{MODEL_MAGIC} v{MODEL_VERSION} {kind}\n"));
    for (name, lines) in sections {
        out.push_str(&format!("[section {} {}]\n", name, lines.len()));
        for l in lines {
            debug_assert!(!l.contains('\n'));
            out.push_str(l);
            out.push('\n');
        }
    }
    out.push_str("[params]\n");
    let mut buf = Vec::new();
    save_params(store, &mut buf).map_err(|source| ModelFileError::Params {
        path: path.display().to_string(),
        source,
    })?;
    out.push_str(&String::from_utf8(buf).expect("container is utf-8"));
    fs::write(path, out).map_err(|source| ModelFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_model(path: &Path, expected_kind: &str) -> Result<ModelFile, ModelFileError> {
    let pathstr = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| ModelFileError::Io {
        path: pathstr.clone(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| ModelFileError::BadMagic {
        path: pathstr.clone(),
    })?;
    let mut hp = header.split_whitespace();
    if hp.next() != Some(MODEL_MAGIC) {
        return Err(ModelFileError::BadMagic { path: pathstr });
    }
    let ver: u32 = hp
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ModelFileError::BadMagic { path: pathstr.clone() })?;
    if ver != MODEL_VERSION {
        return Err(ModelFileError::Version { path: pathstr, found: ver });
    }
    let kind = hp.next().unwrap_or("").to_string();
    if kind != expected_kind {
        return Err(ModelFileError::WrongKind {
            path: pathstr,
            expected: expected_kind.to_string(),
            found: kind,
        });
    }

    let mut sections = BTreeMap::new();
    loop {
        let line = lines.next().ok_or_else(|| ModelFileError::Malformed {
            path: pathstr.clone(),
            message: "missing [params] section".into(),
        })?;
        if line == "[params]" {
            break;
        }
        let inner = line
            .strip_prefix("[section ")
            .and_then(|l| l.strip_suffix(']'))
            .ok_or_else(|| ModelFileError::Malformed {
                path: pathstr.clone(),
                message: format!("unexpected line `{line}`"),
            })?;
        let (name, count) = inner.split_once(' ').ok_or_else(|| ModelFileError::Malformed {
            path: pathstr.clone(),
            message: format!("bad section header `{line}`"),
        })?;
        let count: usize = count.parse().map_err(|_| ModelFileError::Malformed {
            path: pathstr.clone(),
            message: format!("bad section length in `{line}`"),
        })?;
        let mut content = Vec::with_capacity(count);
        for _ in 0..count {
            content.push(
                lines
                    .next()
                    .ok_or_else(|| ModelFileError::Malformed {
                        path: pathstr.clone(),
                        message: format!("section `{name}` truncated"),
                    })?
                    .to_string(),
            );
        }
        sections.insert(name.to_string(), content);
    }

    let rest: String = lines.collect::<Vec<_>>().join("\n");
    let store = load_params(BufReader::new(rest.as_bytes())).map_err(|source| ModelFileError::Params {
        path: pathstr.clone(),
        source,
    })?;
    Ok(ModelFile {
        kind,
        sections,
        store,
        path: pathstr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn model_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, 2.5]));
        write_model(
            &path,
            "tagger",
            &[
                ("config", vec!["dim=50".into(), "depth=2".into()]),
                ("tagset", vec!["NOUN".into(), "VERB".into()]),
            ],
            &store,
        )
        .unwrap();

        let m = read_model(&path, "tagger").unwrap();
        assert_eq!(m.section("tagset").unwrap(), &["NOUN".to_string(), "VERB".to_string()]);
        let cfg = m.config("config").unwrap();
        assert_eq!(cfg["dim"], "50");
        let id = m.store.get("w").unwrap();
        assert_eq!(m.store.value(id).data(), &[1.0, 2.5]);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        let store = ParamStore::new();
        write_model(&path, "parser", &[], &store).unwrap();
        assert!(matches!(
            read_model(&path, "tagger"),
            Err(ModelFileError::WrongKind { .. })
        ));
    }
}
