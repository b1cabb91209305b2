#![allow(dead_code)]

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crossalign::ingest::write_embeddings;
use crossalign_core::TokenEmbeddings;
use rand::Rng;
use rand_distr::StandardNormal;

/// Raw vectors of one synthetic record.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub id: String,
    pub src: Vec<Vec<f32>>,
    pub tgt: Vec<Vec<f32>>,
    pub obj: Vec<Vec<f32>>,
    pub img: Vec<f32>,
    pub pooled: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub manifest: PathBuf,
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub obj: PathBuf,
    pub img: PathBuf,
    pub pooled: PathBuf,
}

impl CorpusFiles {
    /// `--manifest ... --pooled ...` flags for the CLI.
    pub fn flags(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (flag, p) in [
            ("--manifest", &self.manifest),
            ("--src", &self.src),
            ("--tgt", &self.tgt),
            ("--obj", &self.obj),
            ("--img", &self.img),
            ("--pooled", &self.pooled),
        ] {
            v.push(flag.to_string());
            v.push(p.display().to_string());
        }
        v
    }
}

pub fn gaussian_row<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn manifest_line(id: &str) -> String {
    format!(r#"{{"id":"{id}","image_ref":"images/{id}.jpg","caption_src":"源 {id}","caption_tgt":"caption {id}","source_tag":"synthetic"}}"#)
}

fn write_emb(path: &Path, dim: usize, entries: &[(String, TokenEmbeddings)]) {
    let w = BufWriter::new(File::create(path).unwrap());
    write_embeddings(w, dim, entries.iter().map(|(id, m)| (id.as_str(), m))).unwrap();
}

fn matrix(rows: &[Vec<f32>], dim: usize) -> TokenEmbeddings {
    if rows.is_empty() {
        TokenEmbeddings::empty(dim).unwrap()
    } else {
        TokenEmbeddings::from_rows(rows).unwrap()
    }
}

/// Writes a manifest and the five embedding files for `fixtures`.
pub fn write_corpus(dir: &Path, dim: usize, fixtures: &[Fixture]) -> CorpusFiles {
    let files = CorpusFiles {
        manifest: dir.join("manifest.jsonl"),
        src: dir.join("src.emb"),
        tgt: dir.join("tgt.emb"),
        obj: dir.join("obj.emb"),
        img: dir.join("img.emb"),
        pooled: dir.join("pooled.emb"),
    };
    let text: String = fixtures.iter().map(|f| manifest_line(&f.id) + "\n").collect();
    std::fs::write(&files.manifest, text).unwrap();
    let pick = |g: &dyn Fn(&Fixture) -> TokenEmbeddings| -> Vec<(String, TokenEmbeddings)> {
        fixtures.iter().map(|f| (f.id.clone(), g(f))).collect()
    };
    write_emb(&files.src, dim, &pick(&|f| matrix(&f.src, dim)));
    write_emb(&files.tgt, dim, &pick(&|f| matrix(&f.tgt, dim)));
    write_emb(&files.obj, dim, &pick(&|f| matrix(&f.obj, dim)));
    write_emb(&files.img, dim, &pick(&|f| matrix(std::slice::from_ref(&f.img), dim)));
    write_emb(&files.pooled, dim, &pick(&|f| matrix(std::slice::from_ref(&f.pooled), dim)));
    files
}

/// Runs the CLI with a run summary inside `dir`; returns the exit code and
/// what the command printed.
pub fn run_cli(dir: &Path, args: &[String]) -> (i32, String) {
    let mut argv = vec!["crossalign".to_string(), "--run-summary".into(), dir.join("run.json").display().to_string()];
    argv.extend(args.iter().cloned());
    let mut out = Vec::new();
    let code = crossalign::cli::run_with(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

pub fn strings(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

pub fn ids_of(manifest: &Path) -> Vec<String> {
    std::fs::read_to_string(manifest)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].as_str().unwrap().to_string())
        .collect()
}

pub fn assets_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}
