use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pgm::{decode_pgm, encode_pgm, mask_from_pgm, mask_to_pgm};
use super::{io_err, IoError};
use crate::corpus_stats::{RelationAnnotation, SceneGraphRecord, SceneObject};
use crate::rank_eval::{AnnotationRecord, RegionMask};
use crate::scene_model::{to_internal_coords, to_topleft, BBox, DetectedObject, SceneDetections, Vocabulary};

/// What to do with a record that fails validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Fail on the first invalid record or unknown category.
    Strict,
    /// Skip the offending record (or detection entry) and count it.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    /// Records or entries dropped in lenient mode.
    pub skipped: usize,
}

#[derive(Serialize, Deserialize)]
struct ObjectLine {
    id: u64,
    category: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct RelationLine {
    subject: u64,
    predicate: String,
    object: u64,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    image_id: String,
    width: u32,
    height: u32,
    objects: Vec<ObjectLine>,
    #[serde(default)]
    relations: Vec<RelationLine>,
}

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    scores: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct DetectionsLine {
    image_id: String,
    width: u32,
    height: u32,
    detections: Vec<DetectionLine>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    image_id: String,
    annotator_id: String,
    category: String,
    preference: u8,
    box_size: f64,
    /// Mask path relative to the annotation file.
    region: String,
}

/// Deserializes every non-blank line, tagging each with its 1-based number.
fn read_lines<T: DeserializeOwned>(reader: impl BufRead, path: &Path) -> Result<Vec<(usize, T)>, IoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn write_lines<T: Serialize>(path: &Path, lines: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for line in lines {
        serde_json::to_writer(&mut w, &line).map_err(|e| IoError::Contract(e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Converts a file box, clipping it to the image. `None` when nothing is left.
fn ingest_box(b: [f64; 4], width: u32, height: u32) -> Result<Option<BBox>, String> {
    let bbox = to_internal_coords(b[0], b[1], b[2], b[3], height).map_err(|e| e.to_string())?;
    Ok(bbox.clamp_to(width, height))
}

/// Routes one validation failure according to `mode`.
fn reject(mode: Strictness, err: IoError, skipped: &mut usize) -> Result<(), IoError> {
    match mode {
        Strictness::Strict => Err(err),
        Strictness::Lenient => {
            warn!("skipping: {err}");
            *skipped += 1;
            Ok(())
        }
    }
}

fn corpus_record(line: CorpusLine) -> Result<SceneGraphRecord, String> {
    if line.width == 0 || line.height == 0 {
        return Err("image has zero size".into());
    }
    let mut objects = Vec::with_capacity(line.objects.len());
    for o in line.objects {
        let bbox = ingest_box(o.bbox, line.width, line.height)?
            .ok_or_else(|| format!("object {} lies outside the image", o.id))?;
        objects.push(SceneObject { id: o.id, category: o.category, bbox });
    }
    let relations = line
        .relations
        .into_iter()
        .map(|r| RelationAnnotation { subject: r.subject, predicate: r.predicate, object: r.object })
        .collect();
    let record =
        SceneGraphRecord { image_id: line.image_id, width: line.width, height: line.height, objects, relations };
    record.validate().map_err(|e| e.to_string())?;
    Ok(record)
}

pub fn parse_corpus(reader: impl BufRead, path: &Path, mode: Strictness) -> Result<Loaded<SceneGraphRecord>, IoError> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for (line, raw) in read_lines::<CorpusLine>(reader, path)? {
        match corpus_record(raw) {
            Ok(r) => records.push(r),
            Err(message) => reject(mode, IoError::Invalid { path: path.into(), line, message }, &mut skipped)?,
        }
    }
    Ok(Loaded { records, skipped })
}

pub fn load_corpus(path: &Path, mode: Strictness) -> Result<Loaded<SceneGraphRecord>, IoError> {
    parse_corpus(open(path)?, path, mode)
}

pub fn write_corpus(path: &Path, records: &[SceneGraphRecord]) -> Result<(), IoError> {
    write_lines(
        path,
        records.iter().map(|r| CorpusLine {
            image_id: r.image_id.clone(),
            width: r.width,
            height: r.height,
            objects: r
                .objects
                .iter()
                .map(|o| ObjectLine { id: o.id, category: o.category.clone(), bbox: to_topleft(&o.bbox, r.height) })
                .collect(),
            relations: r
                .relations
                .iter()
                .map(|x| RelationLine { subject: x.subject, predicate: x.predicate.clone(), object: x.object })
                .collect(),
        }),
    )
}

/// Scores are mapped onto the context vocabulary; names outside it are
/// unknown. A detection box entirely outside its image is invalid.
pub fn parse_detections(
    reader: impl BufRead,
    path: &Path,
    vocab: &Vocabulary,
    mode: Strictness,
) -> Result<Loaded<SceneDetections>, IoError> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for (line, raw) in read_lines::<DetectionsLine>(reader, path)? {
        let invalid = |message: String| IoError::Invalid { path: path.into(), line, message };
        if raw.width == 0 || raw.height == 0 {
            reject(mode, invalid("image has zero size".into()), &mut skipped)?;
            continue;
        }
        let mut detections = Vec::with_capacity(raw.detections.len());
        for d in raw.detections {
            let bbox = match ingest_box(d.bbox, raw.width, raw.height) {
                Ok(Some(b)) => b,
                Ok(None) => {
                    reject(mode, invalid("detection lies outside the image".into()), &mut skipped)?;
                    continue;
                }
                Err(m) => {
                    reject(mode, invalid(m), &mut skipped)?;
                    continue;
                }
            };
            if let Some((name, s)) = d.scores.iter().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
                reject(mode, invalid(format!("score {s} for {name:?} is outside [0, 1]")), &mut skipped)?;
                continue;
            }
            let mut scores = vec![0.0; vocab.context().len()];
            for (name, s) in d.scores {
                match vocab.context_id(&name) {
                    Some(j) => scores[j] = s,
                    None => reject(mode, IoError::UnknownCategory { path: path.into(), line, name }, &mut skipped)?,
                }
            }
            detections.push(DetectedObject { bbox, scores });
        }
        records.push(SceneDetections { image_id: raw.image_id, width: raw.width, height: raw.height, detections });
    }
    Ok(Loaded { records, skipped })
}

pub fn load_detections(path: &Path, vocab: &Vocabulary, mode: Strictness) -> Result<Loaded<SceneDetections>, IoError> {
    parse_detections(open(path)?, path, vocab, mode)
}

/// Writes every context score, zeros included.
pub fn write_detections(path: &Path, scenes: &[SceneDetections], vocab: &Vocabulary) -> Result<(), IoError> {
    write_lines(
        path,
        scenes.iter().map(|s| DetectionsLine {
            image_id: s.image_id.clone(),
            width: s.width,
            height: s.height,
            detections: s
                .detections
                .iter()
                .map(|d| DetectionLine {
                    bbox: to_topleft(&d.bbox, s.height),
                    scores: vocab.context().iter().cloned().zip(d.scores.iter().copied()).collect(),
                })
                .collect(),
        }),
    )
}

/// Region masks are PGM files resolved relative to `base_dir`; a mask file
/// shared by several records is read once.
pub fn parse_annotations(
    reader: impl BufRead,
    path: &Path,
    base_dir: &Path,
    vocab: &Vocabulary,
    mode: Strictness,
) -> Result<Loaded<AnnotationRecord>, IoError> {
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut masks: HashMap<String, RegionMask> = HashMap::new();
    for (line, raw) in read_lines::<AnnotationLine>(reader, path)? {
        if vocab.insertable_id(&raw.category).is_none() {
            reject(mode, IoError::UnknownCategory { path: path.into(), line, name: raw.category }, &mut skipped)?;
            continue;
        }
        let region = match masks.get(&raw.region) {
            Some(m) => m.clone(),
            None => {
                let mask_path = base_dir.join(&raw.region);
                let bytes = fs::read(&mask_path).map_err(io_err(&mask_path))?;
                let m = decode_pgm(&bytes).map(|p| mask_from_pgm(&p)).map_err(|message| IoError::Invalid {
                    path: mask_path.clone(),
                    line: 0,
                    message,
                })?;
                masks.insert(raw.region.clone(), m.clone());
                m
            }
        };
        records.push(AnnotationRecord {
            image_id: raw.image_id,
            annotator_id: raw.annotator_id,
            category: raw.category,
            preference: raw.preference,
            box_size: raw.box_size,
            region,
        });
    }
    Ok(Loaded { records, skipped })
}

pub fn load_annotations(
    path: &Path,
    vocab: &Vocabulary,
    mode: Strictness,
) -> Result<Loaded<AnnotationRecord>, IoError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_annotations(open(path)?, path, &base, vocab, mode)
}

/// Writes the JSONL file and one PGM per distinct mask under `masks/` next
/// to it. Mask files are named by content hash, so identical masks share a
/// file and output is deterministic.
pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), IoError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mask_dir = base.join("masks");
    fs::create_dir_all(&mask_dir).map_err(io_err(&mask_dir))?;
    let mut written = HashSet::new();
    let mut lines = Vec::with_capacity(records.len());
    for r in records {
        let pgm = encode_pgm(r.region.width, r.region.height, &mask_to_pgm(&r.region));
        let name = format!("masks/{}.pgm", &hex::encode(Sha256::digest(&pgm))[..16]);
        if written.insert(name.clone()) {
            let p: PathBuf = base.join(&name);
            fs::write(&p, &pgm).map_err(io_err(&p))?;
        }
        lines.push(AnnotationLine {
            image_id: r.image_id.clone(),
            annotator_id: r.annotator_id.clone(),
            category: r.category.clone(),
            preference: r.preference,
            box_size: r.box_size,
            region: name,
        });
    }
    write_lines(path, lines)
}
