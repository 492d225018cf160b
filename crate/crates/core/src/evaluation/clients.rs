//! Embedding, perceptual-distance and judging clients.
//!
//! Real models live behind external processes; the mocks are small
//! deterministic stand-ins with hand-checkable outputs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::RgbImage;

use super::prompts::EditTarget;

pub trait ImageEmbedder: Send + Sync {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

pub trait TextEmbedder: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Image and text in one space.
pub trait JointEmbedder: ImageEmbedder + TextEmbedder {}
impl<T: ImageEmbedder + TextEmbedder> JointEmbedder for T {}

pub trait PerceptualMetric: Send + Sync {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
}

/// Decides whether one editing target is visible in a sample.
pub trait Judge: Send + Sync {
    fn judge(&self, sample_id: &str, image: &RgbImage, target: &EditTarget) -> Result<bool>;
    fn describe(&self) -> String;
}

/// Average colour as the image vector; colour words map to their RGB
/// value and other words to small hashed vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockClip;

const COLOURS: [(&str, [f64; 3]); 9] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("purple", [0.5, 0.0, 0.5]),
    ("orange", [1.0, 0.5, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("pink", [1.0, 0.75, 0.8]),
    ("cyan", [0.0, 1.0, 1.0]),
];

fn hashed3(word: &str) -> [f64; 3] {
    let d = Sha256::digest(word.as_bytes());
    [d[0], d[1], d[2]].map(|b| b as f64 / 255.0 * 0.1)
}

impl ImageEmbedder for MockClip {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let n = (image.height * image.width) as f64;
        if n == 0.0 {
            return Err(Error::Client("empty image".into()));
        }
        Ok((0..3).map(|c| image.plane(c).iter().sum::<f64>() / n).collect())
    }
}

impl TextEmbedder for MockClip {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = [0.0; 3];
        for word in text.split_whitespace() {
            let w = word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            let add = COLOURS
                .iter()
                .find(|(name, _)| *name == w)
                .map_or_else(|| hashed3(&w), |(_, rgb)| *rgb);
            for (a, b) in v.iter_mut().zip(add) {
                *a += b;
            }
        }
        Ok(v.to_vec())
    }
}

/// Per-quadrant average colours (12 values).
#[derive(Debug, Clone, Copy, Default)]
pub struct MockDino;

impl ImageEmbedder for MockDino {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let (h, w) = (image.height, image.width);
        if h < 2 || w < 2 {
            return Err(Error::Client("image too small for quadrants".into()));
        }
        let mut out = Vec::with_capacity(12);
        for (y0, y1) in [(0, h / 2), (h / 2, h)] {
            for (x0, x1) in [(0, w / 2), (w / 2, w)] {
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..3 {
                    let plane = image.plane(c);
                    let s: f64 = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).map(|(y, x)| plane[y * w + x]).sum();
                    out.push(s / n);
                }
            }
        }
        Ok(out)
    }
}

/// Mean absolute pixel difference.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockPerceptual;

impl PerceptualMetric for MockPerceptual {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        if (a.height, a.width) != (b.height, b.width) || a.data.is_empty() {
            return Err(Error::Client("images differ in size".into()));
        }
        Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
    }
}

/// Same verdict for every target.
#[derive(Debug, Clone, Copy)]
pub struct FixedJudge(pub bool);

impl Judge for FixedJudge {
    fn judge(&self, _: &str, _: &RgbImage, _: &EditTarget) -> Result<bool> {
        Ok(self.0)
    }

    fn describe(&self) -> String {
        format!("fixed({})", self.0)
    }
}

pub const DEFAULT_JUDGE_THRESHOLD: f64 = 0.25;

/// Passes a target when the image-text similarity with its descriptor
/// reaches `threshold`.
pub struct TextAlignmentJudge<'a> {
    pub embedder: &'a dyn JointEmbedder,
    pub threshold: f64,
}

impl Judge for TextAlignmentJudge<'_> {
    fn judge(&self, _: &str, image: &RgbImage, target: &EditTarget) -> Result<bool> {
        Ok(super::text_alignment(image, &target.descriptor, self.embedder)? >= self.threshold)
    }

    fn describe(&self) -> String {
        format!("text-alignment>={}", self.threshold)
    }
}

/// Human verdicts keyed by sample id, then target name. Missing entries
/// fall through to `fallback`, or count as a judging failure without one.
pub struct HumanVerdicts<'a> {
    pub verdicts: BTreeMap<String, BTreeMap<String, bool>>,
    pub fallback: Option<&'a dyn Judge>,
}

impl HumanVerdicts<'_> {
    pub fn load(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, bool>>> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl Judge for HumanVerdicts<'_> {
    fn judge(&self, sample_id: &str, image: &RgbImage, target: &EditTarget) -> Result<bool> {
        if let Some(v) = self.verdicts.get(sample_id).and_then(|m| m.get(&target.name)) {
            return Ok(*v);
        }
        match self.fallback {
            Some(j) => j.judge(sample_id, image, target),
            None => Err(Error::Client(format!("no verdict for {sample_id}/{}", target.name))),
        }
    }

    fn describe(&self) -> String {
        match self.fallback {
            Some(j) => format!("human verdicts, else {}", j.describe()),
            None => "human verdicts".into(),
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request<'a> {
    EmbedImage { path: &'a Path },
    EmbedText { text: &'a str },
    Distance { a: &'a Path, b: &'a Path },
}

#[derive(Deserialize)]
struct Reply {
    #[serde(default)]
    vector: Option<Vec<f64>>,
    #[serde(default)]
    distance: Option<f64>,
    #[serde(default)]
    error: Option<String>,
}

/// External model reached by spawning `program` per request. The request
/// is one JSON object on stdin (`{"op": "embed_image", "path": ...}`,
/// `{"op": "embed_text", "text": ...}` or `{"op": "distance", "a": ..., "b": ...}`);
/// the reply is one JSON object with `vector`, `distance` or `error`.
#[derive(Debug, Clone)]
pub struct ProcessClient {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ProcessClient {
    /// Splits a command line from an environment variable on whitespace.
    pub fn from_env(var: &str) -> Option<Self> {
        let raw = std::env::var(var).ok()?;
        let mut parts = raw.split_whitespace().map(str::to_string);
        let program = PathBuf::from(parts.next()?);
        Some(Self {
            program,
            args: parts.collect(),
        })
    }

    fn call(&self, req: &Request<'_>) -> Result<Reply> {
        let fail = |m: String| Error::Client(format!("{}: {m}", self.program.display()));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let body = serde_json::to_vec(req)?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(&body)
            .map_err(|e| fail(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exited with {}", out.status)));
        }
        let reply: Reply = serde_json::from_slice(&out.stdout).map_err(|e| fail(e.to_string()))?;
        if let Some(e) = reply.error {
            return Err(fail(e));
        }
        Ok(reply)
    }

    fn with_temp_image<T>(&self, image: &RgbImage, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("image.png");
        image.save(&path)?;
        f(&path)
    }
}

impl ImageEmbedder for ProcessClient {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self.with_temp_image(image, |p| {
            self.call(&Request::EmbedImage { path: p })?
                .vector
                .ok_or_else(|| Error::Client("reply lacks `vector`".into()))
        })
    }
}

impl TextEmbedder for ProcessClient {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.call(&Request::EmbedText { text })?
            .vector
            .ok_or_else(|| Error::Client("reply lacks `vector`".into()))
    }
}

impl PerceptualMetric for ProcessClient {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        self.with_temp_image(a, |pa| {
            self.with_temp_image(b, |pb| {
                self.call(&Request::Distance { a: pa, b: pb })?
                    .distance
                    .ok_or_else(|| Error::Client("reply lacks `distance`".into()))
            })
        })
    }
}
