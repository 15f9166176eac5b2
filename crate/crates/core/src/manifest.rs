//! Sample manifests: one record per image, persisted as a four-column text
//! table (`image_path,label,source,fold`, empty field = absent).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{invalid, Error, Result};
use crate::registry::{ClassRegistry, NUM_CLASSES};

const IMAGE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff", "webp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    WbcbenchTrain,
    WbcbenchTest,
    Acevedo20,
    Blood8,
    Cellwiki,
}

impl Source {
    pub const ALL: [Source; 5] = [
        Source::WbcbenchTrain,
        Source::WbcbenchTest,
        Source::Acevedo20,
        Source::Blood8,
        Source::Cellwiki,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::WbcbenchTrain => "wbcbench_train",
            Source::WbcbenchTest => "wbcbench_test",
            Source::Acevedo20 => "acevedo20",
            Source::Blood8 => "blood8",
            Source::Cellwiki => "cellwiki",
        }
    }

    /// Only the challenge test split ships without labels.
    pub fn is_labeled(self) -> bool {
        self != Source::WbcbenchTest
    }

    pub fn is_external(self) -> bool {
        matches!(self, Source::Acevedo20 | Source::Blood8 | Source::Cellwiki)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|src| src.as_str() == s.trim())
            .ok_or_else(|| invalid(format!("unknown source `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: String,
    /// Registry index of the label.
    pub label: Option<usize>,
    pub source: Source,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    records: Vec<SampleRecord>,
    registry: ClassRegistry,
    pub provenance: Vec<String>,
    /// Directory that relative image paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

/// Maps source-local directory labels to registry codes.
///
/// Lookup order is the exact `(source, label)` entry, then a wildcard
/// entry for the label. A `None` target means "skip this label".
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassMap {
    exact: BTreeMap<(Source, String), Option<String>>,
    wildcard: BTreeMap<String, Option<String>>,
}

impl ClassMap {
    /// Every registry code maps to itself, for any source.
    pub fn identity(registry: &ClassRegistry) -> Self {
        let mut map = Self::default();
        for code in registry.codes() {
            map.wildcard.insert(code.to_string(), Some(code.to_string()));
        }
        map
    }

    pub fn insert(&mut self, source: Option<Source>, label: &str, code: Option<&str>) {
        let target = code.map(str::to_string);
        match source {
            Some(src) => {
                self.exact.insert((src, label.to_string()), target);
            }
            None => {
                self.wildcard.insert(label.to_string(), target);
            }
        }
    }

    /// `source,local_label,code` per line; `*` as source is a wildcard and
    /// `-` as code skips the label.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    what: "class map",
                    line: lineno + 1,
                    reason: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            let source = match fields[0] {
                "*" => None,
                s => Some(s.parse::<Source>()?),
            };
            let code = (fields[2] != "-").then_some(fields[2]);
            map.insert(source, fields[1], code);
        }
        Ok(map)
    }

    /// `Ok(None)` = explicitly skipped.
    pub fn lookup(&self, source: Source, label: &str) -> Result<Option<&str>> {
        let hit = self
            .exact
            .get(&(source, label.to_string()))
            .or_else(|| self.wildcard.get(label));
        match hit {
            Some(target) => Ok(target.as_deref()),
            None => Err(Error::UnmappedLabel {
                source_name: source.to_string(),
                label: label.to_string(),
            }),
        }
    }
}

fn normalize_path(path: &str) -> String {
    let mut parts: Vec<String> = Vec::new();
    let absolute = Path::new(path).has_root();
    for comp in Path::new(path).components() {
        match comp {
            Component::CurDir | Component::RootDir | Component::Prefix(_) => {}
            Component::ParentDir => {
                if parts.last().is_some_and(|p| p != "..") {
                    parts.pop();
                } else {
                    parts.push("..".into());
                }
            }
            Component::Normal(s) => parts.push(s.to_string_lossy().into_owned()),
        }
    }
    let joined = parts.join("/");
    if absolute {
        format!("/{joined}")
    } else {
        joined
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

impl Manifest {
    /// Validates record invariants and sorts records by path.
    pub fn new(registry: ClassRegistry, mut records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut dups = BTreeSet::new();
        for r in &records {
            if !seen.insert(normalize_path(&r.image_path)) {
                dups.insert(r.image_path.clone());
            }
            if let Some(l) = r.label {
                if l >= registry.len() {
                    return Err(Error::UnknownLabel(format!("index {l}")));
                }
            }
            if r.label.is_some() != r.source.is_labeled() {
                return Err(invalid(format!(
                    "{}: label presence does not match source {}",
                    r.image_path, r.source
                )));
            }
            if r.fold.is_some() && r.label.is_none() {
                return Err(invalid(format!("{}: fold on unlabeled record", r.image_path)));
            }
        }
        if !dups.is_empty() {
            return Err(Error::DuplicatePaths(dups.into_iter().collect()));
        }
        records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
        Ok(Self {
            records,
            registry,
            provenance: Vec::new(),
            base_dir: None,
        })
    }

    pub fn empty(registry: ClassRegistry) -> Self {
        Self {
            records: Vec::new(),
            registry,
            provenance: Vec::new(),
            base_dir: None,
        }
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub(crate) fn set_folds(&mut self, folds: Vec<Option<usize>>) {
        for (r, f) in self.records.iter_mut().zip(folds) {
            r.fold = f;
        }
    }

    /// Labeled record count per registry class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for l in self.records.iter().filter_map(|r| r.label) {
            counts[l] += 1;
        }
        counts
    }

    pub fn source_class_counts(&self) -> BTreeMap<(Source, Option<usize>), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.source, r.label)).or_insert(0) += 1;
        }
        out
    }

    /// Indices of labeled records whose fold satisfies `keep`.
    pub fn labeled_indices(&self, keep: impl Fn(Option<usize>) -> bool) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label.is_some() && keep(r.fold))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn resolve_path(&self, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn provenance_counts(&self) -> Vec<String> {
        self.source_class_counts()
            .into_iter()
            .map(|((src, label), n)| {
                let code = label.map_or("-", |l| self.registry.code(l));
                format!("count {src} {code} {n}")
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("csv.tmp");
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            w.write_record(["image_path", "label", "source", "fold"])?;
            for r in &self.records {
                let label = r.label.map_or("", |l| self.registry.code(l));
                let fold = r.fold.map(|f| f.to_string()).unwrap_or_default();
                w.write_record([r.image_path.as_str(), label, r.source.as_str(), &fold])?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        if !self.provenance.is_empty() {
            let mut text = self.provenance.join("\n");
            text.push('\n');
            std::fs::write(provenance_path(path), text)?;
        }
        Ok(())
    }

    /// Reads a manifest table; relative paths resolve against its directory.
    pub fn read_csv(path: &Path, registry: &ClassRegistry) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let header = reader.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["image_path", "label", "source", "fold"] {
            return Err(Error::Parse {
                what: "manifest",
                line: 1,
                reason: "expected header image_path,label,source,fold".into(),
            });
        }
        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row?;
            let parse_err = |reason: String| Error::Parse {
                what: "manifest",
                line: i + 2,
                reason,
            };
            if row.len() != 4 {
                return Err(parse_err(format!("expected 4 fields, found {}", row.len())));
            }
            let label = match &row[1] {
                "" => None,
                code => Some(registry.require_index(code)?),
            };
            let fold = match &row[3] {
                "" => None,
                f => Some(f.parse::<usize>().map_err(|e| parse_err(e.to_string()))?),
            };
            records.push(SampleRecord {
                image_path: row[0].to_string(),
                label,
                source: row[2].parse()?,
                fold,
            });
        }
        let mut manifest = Manifest::new(registry.clone(), records)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf);
        if let Ok(text) = std::fs::read_to_string(provenance_path(path)) {
            manifest.provenance = text.lines().map(str::to_string).collect();
        }
        Ok(manifest)
    }
}

fn provenance_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.txt");
    manifest.with_file_name(name)
}

/// Scans source directories into a manifest.
///
/// Labeled sources are laid out as `<dir>/<local_label>/**/<image>`; the
/// unlabeled test source takes every image under its directory. Files that
/// cannot be opened are skipped and counted in the provenance log.
pub fn build_manifest(
    source_dirs: &BTreeMap<Source, PathBuf>,
    class_map: &ClassMap,
    registry: &ClassRegistry,
) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut provenance = Vec::new();
    let mut skipped_labels: BTreeMap<(Source, String), usize> = BTreeMap::new();
    let mut unreadable = 0usize;

    for (&source, dir) in source_dirs {
        if !dir.is_dir() {
            return Err(invalid(format!(
                "source {source}: {} is not a directory",
                dir.display()
            )));
        }
        for entry in WalkDir::new(dir).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
            let path = entry.path();
            if !entry.file_type().is_file() || !is_image_file(path) {
                continue;
            }
            let label = if source.is_labeled() {
                let rel = path.strip_prefix(dir).unwrap_or(path);
                let mut comps = rel.components();
                let local = match (comps.next(), comps.next()) {
                    (Some(Component::Normal(l)), Some(_)) => l.to_string_lossy().into_owned(),
                    _ => {
                        return Err(invalid(format!(
                            "source {source}: {} is not inside a label directory",
                            path.display()
                        )))
                    }
                };
                match class_map.lookup(source, &local)? {
                    Some(code) => Some(registry.require_index(code)?),
                    None => {
                        *skipped_labels.entry((source, local)).or_insert(0) += 1;
                        continue;
                    }
                }
            } else {
                None
            };
            if File::open(path).is_err() {
                unreadable += 1;
                log::warn!("skipping unreadable file {}", path.display());
                continue;
            }
            records.push(SampleRecord {
                image_path: path.to_string_lossy().into_owned(),
                label,
                source,
                fold: None,
            });
        }
    }

    let mut manifest = Manifest::new(registry.clone(), records)?;
    provenance.push(format!("built from {} source directories", source_dirs.len()));
    for (src, dir) in source_dirs {
        provenance.push(format!("source {src} {}", dir.display()));
    }
    provenance.extend(manifest.provenance_counts());
    for ((src, label), n) in skipped_labels {
        provenance.push(format!("skipped {src} label `{label}`: {n} files"));
    }
    provenance.push(format!("unreadable files skipped: {unreadable}"));
    manifest.provenance = provenance;
    Ok(manifest)
}

/// Union of manifests sharing one registry. Duplicate paths are an error.
pub fn merge_manifests(manifests: &[Manifest]) -> Result<Manifest> {
    let first = manifests
        .first()
        .ok_or_else(|| invalid("merge needs at least one manifest"))?;
    if manifests.iter().any(|m| m.registry != first.registry) {
        return Err(Error::RegistryMismatch);
    }
    let bases: BTreeSet<Option<&PathBuf>> = manifests
        .iter()
        .filter(|m| !m.is_empty())
        .map(|m| m.base_dir.as_ref())
        .collect();
    let shared_base = bases.len() <= 1;

    let mut records = Vec::new();
    let mut provenance = Vec::new();
    for (i, m) in manifests.iter().enumerate() {
        provenance.push(format!("merge input {i}: {} records", m.len()));
        provenance.extend(m.provenance.iter().map(|l| format!("  {l}")));
        for r in &m.records {
            let mut r = r.clone();
            if !shared_base {
                r.image_path = m.resolve_path(&r).to_string_lossy().into_owned();
            }
            records.push(r);
        }
    }
    let mut merged = Manifest::new(first.registry.clone(), records)?;
    if shared_base {
        merged.base_dir = bases.into_iter().next().flatten().cloned();
    }
    let external = merged
        .records
        .iter()
        .filter(|r| r.source.is_external())
        .count();
    provenance.push(format!("merged total: {} records", merged.len()));
    provenance.push(format!("external-source records: {external}"));
    provenance.extend(merged.provenance_counts());
    merged.provenance = provenance;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, label: Option<usize>) -> SampleRecord {
        SampleRecord {
            image_path: path.into(),
            label,
            source: if label.is_some() {
                Source::WbcbenchTrain
            } else {
                Source::WbcbenchTest
            },
            fold: None,
        }
    }

    #[test]
    fn duplicate_detection_normalizes_paths() {
        let reg = ClassRegistry::builtin();
        let err = Manifest::new(reg, vec![rec("a/./b.png", Some(0)), rec("a/b.png", Some(1))]);
        assert!(matches!(err, Err(Error::DuplicatePaths(_))));
    }

    #[test]
    fn label_presence_must_match_source() {
        let reg = ClassRegistry::builtin();
        let mut r = rec("x.png", None);
        r.source = Source::Acevedo20;
        assert!(Manifest::new(reg, vec![r]).is_err());
    }

    #[test]
    fn class_map_lookup_order() {
        let reg = ClassRegistry::builtin();
        let mut map = ClassMap::identity(&reg);
        map.insert(Some(Source::Acevedo20), "neutrophil", Some("SNE"));
        map.insert(None, "erythroblast", None);
        assert_eq!(map.lookup(Source::Acevedo20, "neutrophil").unwrap(), Some("SNE"));
        assert_eq!(map.lookup(Source::Blood8, "LY").unwrap(), Some("LY"));
        assert_eq!(map.lookup(Source::Blood8, "erythroblast").unwrap(), None);
        let err = map.lookup(Source::Blood8, "platelet").unwrap_err();
        assert!(err.to_string().contains("platelet"));
    }

    #[test]
    fn class_map_parses_text() {
        let map = ClassMap::parse("acevedo20,ig,MY\n* , platelet , -\n# comment\n").unwrap();
        assert_eq!(map.lookup(Source::Acevedo20, "ig").unwrap(), Some("MY"));
        assert_eq!(map.lookup(Source::Cellwiki, "platelet").unwrap(), None);
        assert!(ClassMap::parse("acevedo20,ig\n").is_err());
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let reg = ClassRegistry::builtin();
        let a = Manifest::new(reg.clone(), vec![rec("b.png", Some(2)), rec("a.png", None)]).unwrap();
        let merged = merge_manifests(&[a.clone(), Manifest::empty(reg)]).unwrap();
        assert_eq!(merged.records(), a.records());
        assert_eq!(merged.class_counts(), a.class_counts());
    }

    #[test]
    fn merge_rejects_duplicates_and_registry_mismatch() {
        let reg = ClassRegistry::builtin();
        let a = Manifest::new(reg.clone(), vec![rec("a.png", Some(0))]).unwrap();
        let b = Manifest::new(reg.clone(), vec![rec("a.png", Some(1))]).unwrap();
        match merge_manifests(&[a.clone(), b]) {
            Err(Error::DuplicatePaths(p)) => assert_eq!(p, vec!["a.png".to_string()]),
            other => panic!("expected duplicate error, got {other:?}"),
        }
        let mut entries = reg.entries().to_vec();
        entries.swap(0, 1);
        let other = Manifest::empty(ClassRegistry::from_entries(entries).unwrap());
        assert!(matches!(merge_manifests(&[a, other]), Err(Error::RegistryMismatch)));
    }
}
