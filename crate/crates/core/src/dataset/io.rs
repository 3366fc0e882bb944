//! On-disk dataset format.
//!
//! A dataset directory holds:
//! - `manifest.jsonl` — one JSON object per record, fields exactly as
//!   [`VQARecord`]
//! - `vocab.txt` — one token per line
//! - `images/<id>.pgm` — binary portable graymaps (P5)

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dataset::{Dataset, Image, VQARecord};
use crate::error::{CoreError, Result};

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| CoreError::io(img_dir.display().to_string(), e))?;

    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = String::new();
    for rec in &ds.records {
        let line = serde_json::to_string(rec)
            .map_err(|e| CoreError::contract(format!("manifest serialization: {e}")))?;
        manifest.push_str(&line);
        manifest.push('\n');
    }
    fs::write(&manifest_path, manifest)
        .map_err(|e| CoreError::io(manifest_path.display().to_string(), e))?;

    let vocab_path = dir.join("vocab.txt");
    let mut vocab = String::new();
    for tok in &ds.vocab {
        vocab.push_str(tok);
        vocab.push('\n');
    }
    fs::write(&vocab_path, vocab).map_err(|e| CoreError::io(vocab_path.display().to_string(), e))?;

    for (&id, img) in &ds.images {
        let path = img_dir.join(format!("{id}.pgm"));
        write_pgm(&path, img)?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CoreError::io(manifest_path.display().to_string(), e))?;
    let mut records: Vec<VQARecord> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: VQARecord = serde_json::from_str(line).map_err(|e| CoreError::Parse {
            path: manifest_path.display().to_string(),
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }

    let vocab_path = dir.join("vocab.txt");
    let vtext = fs::read_to_string(&vocab_path)
        .map_err(|e| CoreError::io(vocab_path.display().to_string(), e))?;
    let vocab: Vec<String> = vtext.lines().map(|s| s.to_string()).collect();

    let mut images = BTreeMap::new();
    for rec in &records {
        if images.contains_key(&rec.id) {
            continue;
        }
        let path = dir.join("images").join(format!("{}.pgm", rec.id));
        if !path.exists() {
            return Err(CoreError::MissingImage { id: rec.id });
        }
        images.insert(rec.id, read_pgm(&path)?);
    }

    Ok(Dataset {
        records,
        images,
        vocab,
    })
}

fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(img.pixels.len() + 20);
    write!(buf, "P5\n{} {}\n255\n", img.side, img.side)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    buf.extend_from_slice(&img.pixels);
    fs::write(path, buf).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let parse_err = |reason: &str| CoreError::Parse {
        path: path.display().to_string(),
        line: 1,
        reason: reason.to_string(),
    };
    // header: "P5" <width> <height> <maxval> single-whitespace, then payload
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| parse_err("bad header"))?);
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(parse_err("expected binary PGM (P5) header"));
    }
    let w: usize = fields[1].parse().map_err(|_| parse_err("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| parse_err("bad height"))?;
    if fields[3] != "255" {
        return Err(parse_err("expected maxval 255"));
    }
    if w != h {
        return Err(parse_err("expected a square image"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(parse_err("truncated pixel payload"));
    }
    Ok(Image {
        side: w,
        pixels: bytes[pos..pos + w * h].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("cagul-ds-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn dir_fingerprint(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap()).collect();
            entries.sort_by_key(|e| e.path());
            for e in entries {
                if e.path().is_dir() {
                    stack.push(e.path());
                } else {
                    out.push((
                        e.path().strip_prefix(dir).unwrap().display().to_string(),
                        fs::read(e.path()).unwrap(),
                    ));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ds = generate(5, 8, 2, 42).unwrap();
        let d1 = tmpdir("rt1");
        let d2 = tmpdir("rt2");
        save(&ds, &d1).unwrap();
        let loaded = load(&d1).unwrap();
        assert_eq!(loaded.records, ds.records);
        assert_eq!(loaded.vocab, ds.vocab);
        assert_eq!(loaded.images, ds.images);
        save(&loaded, &d2).unwrap();
        assert_eq!(dir_fingerprint(&d1), dir_fingerprint(&d2));
        fs::remove_dir_all(d1).unwrap();
        fs::remove_dir_all(d2).unwrap();
    }

    #[test]
    fn truncated_manifest_reports_line_number() {
        let ds = generate(3, 6, 2, 1).unwrap();
        let dir = tmpdir("trunc");
        save(&ds, &dir).unwrap();
        let path = dir.join("manifest.jsonl");
        let mut text = fs::read_to_string(&path).unwrap();
        text.truncate(text.len() - 30); // cut into the last record
        fs::write(&path, text).unwrap();
        match load(&dir) {
            Err(CoreError::Parse { line, .. }) => assert_eq!(line, 18),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn missing_image_names_the_individual() {
        let ds = generate(3, 6, 2, 1).unwrap();
        let dir = tmpdir("missing");
        save(&ds, &dir).unwrap();
        fs::remove_file(dir.join("images").join("1.pgm")).unwrap();
        match load(&dir) {
            Err(CoreError::MissingImage { id }) => assert_eq!(id, 1),
            other => panic!("expected missing-image error, got {other:?}"),
        }
        fs::remove_dir_all(dir).unwrap();
    }
}
