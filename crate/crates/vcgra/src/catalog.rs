// SPDX-License-Identifier: Apache-2.0

//! Kernel catalog files.
//!
//! A catalog is TOML with one `[[kernel]]` table per kind; see
//! `data/catalog.toml` for the built-in evaluation mix.

use std::path::Path;

use serde::Deserialize;
use vcgra_core::kernels::KernelTemplate;
use vcgra_core::{KernelCatalog, KernelId};

pub const BUILTIN: &str = include_str!("../data/catalog.toml");

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("catalog: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("catalog: kind `{0}` listed twice")]
    Duplicate(String),
    #[error("catalog: kind `{kind}`: {reason}")]
    Invalid { kind: String, reason: String },
    #[error("catalog is empty")]
    Empty,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    #[serde(default)]
    kernel: Vec<KernelTemplate>,
}

pub fn parse(text: &str) -> Result<KernelCatalog, CatalogError> {
    let file: CatalogFile = toml::from_str(text)?;
    if file.kernel.is_empty() {
        return Err(CatalogError::Empty);
    }
    let mut catalog = KernelCatalog::new();
    for t in file.kernel {
        if t.kind.is_empty() || t.kind.contains([',', '\n', '"']) {
            return Err(CatalogError::Invalid {
                kind: t.kind,
                reason: "kind must be non-empty, without commas or quotes".into(),
            });
        }
        t.instantiate(KernelId(0))
            .validate()
            .map_err(|e| CatalogError::Invalid { kind: t.kind.clone(), reason: e.to_string() })?;
        let kind = t.kind.clone();
        if catalog.insert(t).is_some() {
            return Err(CatalogError::Duplicate(kind));
        }
    }
    Ok(catalog)
}

/// `None` loads the built-in mix.
pub fn load(path: Option<&Path>) -> Result<KernelCatalog, CatalogError> {
    match path {
        None => parse(BUILTIN),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|source| CatalogError::Io { path: p.display().to_string(), source })?;
            parse(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_matches_core_mix() {
        assert_eq!(load(None).unwrap(), KernelCatalog::evaluation_mix());
    }

    #[test]
    fn rejects_bad_catalogs() {
        assert!(matches!(parse(""), Err(CatalogError::Empty)));
        let one = "[[kernel]]\nkind='a'\nheight=1\nwidth=1\nit_total=1\ncycles_per_iter=1\nbw_demand=0.1\ntcdm_bytes=0\nrestartable=true\n";
        assert_eq!(parse(one).unwrap().len(), 1);
        assert!(matches!(parse(&format!("{one}{one}")), Err(CatalogError::Duplicate(_))));
        assert!(matches!(parse(&one.replace("height=1", "height=0")), Err(CatalogError::Invalid { .. })));
        assert!(matches!(parse(&format!("{one}colour='red'\n")), Err(CatalogError::Toml(_))));
    }
}
