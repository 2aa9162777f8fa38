//! Manifests, speaker-disjoint folds and the synthetic four-class corpus.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{write_wav, SampleBuffer};
use crate::error::{Error, Result};

/// Class index order used for every confusion-matrix axis.
pub const CLASS_NAMES: [&str; 4] = ["neutral", "happy", "sad", "angry"];

/// Accepts full names and the common three-letter codes.
pub fn parse_label(s: &str) -> Option<usize> {
    match s.trim().to_ascii_lowercase().as_str() {
        "neutral" | "neu" => Some(0),
        "happy" | "hap" => Some(1),
        "sad" => Some(2),
        "angry" | "ang" => Some(3),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub path: PathBuf,
    pub label: usize,
    pub session: String,
    pub speaker: String,
}

struct ManifestRow {
    id: String,
    path: String,
    label: String,
    session: String,
    speaker: String,
}

fn manifest_err(line: u64, message: impl Into<String>) -> Error {
    Error::Manifest {
        line,
        message: message.into(),
    }
}

/// Reads `id,path,label,session,speaker`. Relative audio paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, true)
}

pub fn parse_manifest(text: &str, base: &Path, check_files: bool) -> Result<Vec<Utterance>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| manifest_err(1, e.to_string()))?.clone();
    let want = ["id", "path", "label", "session", "speaker"];
    if header.iter().collect::<Vec<_>>() != want {
        return Err(manifest_err(1, format!("header must be {}", want.join(","))));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            manifest_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = ManifestRow {
            id: rec[0].to_string(),
            path: rec[1].to_string(),
            label: rec[2].to_string(),
            session: rec[3].to_string(),
            speaker: rec[4].to_string(),
        };
        for (field, value) in want.iter().zip([&row.id, &row.path, &row.label, &row.session, &row.speaker]) {
            if value.is_empty() {
                return Err(manifest_err(line, format!("empty {field}")));
            }
        }
        let label = parse_label(&row.label).ok_or_else(|| {
            manifest_err(
                line,
                format!("unknown label {:?}; expected one of {}", row.label, CLASS_NAMES.join(", ")),
            )
        })?;
        if !seen.insert(row.id.clone()) {
            return Err(manifest_err(line, format!("duplicate id {:?}", row.id)));
        }
        let audio = base.join(&row.path);
        if check_files && !audio.is_file() {
            return Err(manifest_err(line, format!("missing file {}", audio.display())));
        }
        out.push(Utterance {
            id: row.id,
            path: audio,
            label,
            session: row.session,
            speaker: row.speaker,
        });
    }
    Ok(out)
}

/// Indices into the utterance list for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub fold: usize,
    pub held_out_session: String,
    pub validation_speaker: String,
    pub test_speaker: String,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fold `k` holds out the `k`-th session in sorted order. Its lexicographically
/// first speaker validates, the other tests; every other session trains.
pub fn split_folds(utterances: &[Utterance], num_folds: usize) -> Result<Vec<FoldPlan>> {
    let mut sessions: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for u in utterances {
        sessions.entry(&u.session).or_default().insert(&u.speaker);
    }
    if sessions.len() != num_folds {
        return Err(Error::Split(format!(
            "{} sessions found, {num_folds} folds need exactly {num_folds}",
            sessions.len()
        )));
    }
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for (session, speakers) in &sessions {
        if speakers.len() != 2 {
            return Err(Error::Split(format!(
                "session {session} has {} speakers, expected 2",
                speakers.len()
            )));
        }
        for sp in speakers {
            if let Some(other) = owner.insert(sp, session) {
                return Err(Error::Split(format!(
                    "speaker {sp} appears in sessions {other} and {session}"
                )));
            }
        }
    }
    Ok(sessions
        .iter()
        .enumerate()
        .map(|(fold, (session, speakers))| {
            let mut sp = speakers.iter();
            let (val, test) = (*sp.next().unwrap(), *sp.next().unwrap());
            let pick = |keep: &dyn Fn(&Utterance) -> bool| -> Vec<usize> {
                (0..utterances.len()).filter(|&i| keep(&utterances[i])).collect()
            };
            FoldPlan {
                fold,
                held_out_session: session.to_string(),
                validation_speaker: val.to_string(),
                test_speaker: test.to_string(),
                train: pick(&|u| u.session != *session),
                validation: pick(&|u| u.session == *session && u.speaker == val),
                test: pick(&|u| u.session == *session && u.speaker == test),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub per_class: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub sample_rate_hz: u32,
    pub sessions: usize,
    pub speakers_per_session: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_class: 50,
            min_seconds: 0.5,
            max_seconds: 3.0,
            sample_rate_hz: 16_000,
            sessions: 5,
            speakers_per_session: 2,
        }
    }
}

/// Voiced span of a synthetic utterance, in samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub id: String,
    pub voiced_start: usize,
    pub voiced_end: usize,
    pub total: usize,
}

/// Band centre for class `k`: four 1 kHz bands covering 0-4 kHz.
pub fn band_centre_hz(class: usize) -> f64 {
    1000.0 * class as f64 + 500.0
}

pub const BAND_WIDTH_HZ: f64 = 600.0;
const AM_RATES_HZ: [f64; 4] = [3.0, 5.0, 7.0, 9.0];
const NOISE_FLOOR: f64 = 1e-3;
const PARTIALS: usize = 24;

struct Speaker {
    shift_hz: f64,
    gain: f64,
}

/// One utterance: band-limited noise with a class-specific amplitude
/// modulation, between leading and trailing near-silence.
fn synth_utterance(rng: &mut ChaCha8Rng, class: usize, speaker: &Speaker, cfg: &SynthConfig) -> (Vec<f64>, usize, usize) {
    let rate = cfg.sample_rate_hz as f64;
    let secs = rng.random_range(cfg.min_seconds..=cfg.max_seconds);
    let total = (secs * rate).round() as usize;
    let lead = (total as f64 * rng.random_range(0.20..=0.35)) as usize;
    let trail = (total as f64 * rng.random_range(0.20..=0.35)) as usize;
    let (start, end) = (lead, total - trail);

    let centre = band_centre_hz(class) + speaker.shift_hz;
    let partials: Vec<(f64, f64)> = (0..PARTIALS)
        .map(|_| {
            let f = centre + rng.random_range(-0.5..=0.5) * BAND_WIDTH_HZ;
            (2.0 * PI * f / rate, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let am = 2.0 * PI * AM_RATES_HZ[class] * rng.random_range(0.95..=1.05) / rate;
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let amp = 0.25 * speaker.gain / (PARTIALS as f64).sqrt();

    let mut out = Vec::with_capacity(total);
    for n in 0..total {
        let mut x = NOISE_FLOOR * rng.random_range(-1.0..=1.0);
        if (start..end).contains(&n) {
            let tone: f64 = partials.iter().map(|&(w, ph)| (w * n as f64 + ph).sin()).sum();
            let env = 0.5 * (1.0 + 0.8 * (am * n as f64 + am_phase).sin());
            x += amp * env * tone;
        }
        out.push(x.clamp(-1.0, 1.0));
    }
    (out, start, end)
}

/// Writes `wav/<id>.wav`, `manifest.csv` and `segments.csv` under `out_dir`.
/// Utterance `i` of each class goes to speaker `i mod (sessions x speakers)`.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<(Vec<Utterance>, Vec<Segment>)> {
    if cfg.per_class == 0 || cfg.sessions == 0 || cfg.speakers_per_session == 0 {
        return Err(Error::Config("synthetic corpus needs at least one utterance, session and speaker".into()));
    }
    if !(cfg.min_seconds > 0.0 && cfg.min_seconds <= cfg.max_seconds) {
        return Err(Error::Config(format!(
            "duration range {}..{} s is empty",
            cfg.min_seconds, cfg.max_seconds
        )));
    }
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_speakers = cfg.sessions * cfg.speakers_per_session;
    let speakers: Vec<Speaker> = (0..num_speakers)
        .map(|_| Speaker {
            shift_hz: rng.random_range(-100.0..=100.0),
            gain: rng.random_range(0.6..=1.0),
        })
        .collect();

    let mut utts = Vec::new();
    let mut segs = Vec::new();
    let mut manifest = String::from("id,path,label,session,speaker\n");
    let mut segments = String::from("id,voiced_start,voiced_end,total\n");
    for class in 0..CLASS_NAMES.len() {
        for i in 0..cfg.per_class {
            let spk = i % num_speakers;
            let session = format!("S{}", spk / cfg.speakers_per_session + 1);
            let speaker = format!("{session}{}", (b'A' + (spk % cfg.speakers_per_session) as u8) as char);
            let id = format!("{}_{i:03}", CLASS_NAMES[class]);
            let (samples, start, end) = synth_utterance(&mut rng, class, &speakers[spk], cfg);
            let rel = format!("wav/{id}.wav");
            let path = out_dir.join(&rel);
            let total = samples.len();
            write_wav(
                &path,
                &SampleBuffer {
                    samples,
                    sample_rate_hz: cfg.sample_rate_hz,
                },
            )?;
            manifest.push_str(&format!("{id},{rel},{},{session},{speaker}\n", CLASS_NAMES[class]));
            segments.push_str(&format!("{id},{start},{end},{total}\n"));
            segs.push(Segment {
                id: id.clone(),
                voiced_start: start,
                voiced_end: end,
                total,
            });
            utts.push(Utterance {
                id,
                path,
                label: class,
                session,
                speaker,
            });
        }
    }
    write_text(&out_dir.join("manifest.csv"), &manifest)?;
    write_text(&out_dir.join("segments.csv"), &segments)?;
    Ok((utts, segs))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_segments(path: &Path) -> Result<Vec<Segment>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Manifest {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| manifest_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| manifest_err(line, format!("column {i} is not a sample index")))
        };
        out.push(Segment {
            id: rec.get(0).unwrap_or_default().to_string(),
            voiced_start: num(1)?,
            voiced_end: num(2)?,
            total: num(3)?,
        });
    }
    Ok(out)
}
