//! PCM audio to magnitude spectrogram.
//!
//! Overlapping Hamming-windowed frames, zero-padded to the DFT length, keeping
//! the low-frequency bins. Magnitudes are left linear.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PCM_SCALE: f64 = 1.0 / 32768.0;
const SPG_MAGIC: &[u8; 4] = b"SPG1";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrogramConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub dft_len: usize,
    pub keep_bins: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            window_ms: 40.0,
            shift_ms: 10.0,
            dft_len: 800,
            keep_bins: 200,
        }
    }
}

impl SpectrogramConfig {
    pub fn window_samples(&self, rate: u32) -> usize {
        (self.window_ms * rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, rate: u32) -> usize {
        (self.shift_ms * rate as f64 / 1000.0).round() as usize
    }

    /// Number of complete frames for a signal of `n` samples.
    pub fn num_frames(&self, n: usize, rate: u32) -> usize {
        let win = self.window_samples(rate);
        if n < win {
            0
        } else {
            (n - win) / self.shift_samples(rate) + 1
        }
    }

    pub fn validate(&self, rate: u32) -> Result<()> {
        let win = self.window_samples(rate);
        if win < 2 {
            return Err(Error::Config(format!(
                "window of {} ms is {win} samples at {rate} Hz",
                self.window_ms
            )));
        }
        if self.shift_samples(rate) == 0 {
            return Err(Error::Config(format!(
                "shift of {} ms rounds to zero samples",
                self.shift_ms
            )));
        }
        if win > self.dft_len {
            return Err(Error::Config(format!(
                "window of {win} samples exceeds dft_len {}",
                self.dft_len
            )));
        }
        if self.keep_bins == 0 || self.keep_bins > self.dft_len / 2 + 1 {
            return Err(Error::Config(format!(
                "keep_bins {} outside 1..={}",
                self.keep_bins,
                self.dft_len / 2 + 1
            )));
        }
        Ok(())
    }
}

/// Frequency × time magnitude grid, shape `[keep_bins, num_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub grid: Tensor<f64>,
    pub config: SpectrogramConfig,
    pub sample_rate_hz: u32,
}

impl Spectrogram {
    pub fn num_bins(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.grid.shape()[1]
    }

    /// `log(1 + x/eps)` compression; off by default.
    pub fn log_compressed(&self, eps: f64) -> Self {
        Self {
            grid: self.grid.map(|x| (x / eps).ln_1p()),
            ..self.clone()
        }
    }

    /// Writes the SPG1 cache: magic, u32 keep_bins, num_frames, sample_rate,
    /// then f32 magnitudes in time-major order.
    pub fn write_spg(&self, path: &Path) -> Result<()> {
        let (bins, frames) = (self.num_bins(), self.num_frames());
        let mut out = Vec::with_capacity(spg_file_len(bins, frames) as usize);
        out.extend_from_slice(SPG_MAGIC);
        out.extend_from_slice(&(bins as u32).to_le_bytes());
        out.extend_from_slice(&(frames as u32).to_le_bytes());
        out.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        let g = self.grid.data();
        for t in 0..frames {
            for f in 0..bins {
                out.extend_from_slice(&(g[f * frames + t] as f32).to_le_bytes());
            }
        }
        write_atomically(path, &out)
    }

    pub fn read_spg(path: &Path, config: SpectrogramConfig) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 {
            return Err(Error::format(bytes.len() as u64, "truncated SPG1 header"));
        }
        if &bytes[..4] != SPG_MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let bins = u32_at(&bytes, 4) as usize;
        let frames = u32_at(&bytes, 8) as usize;
        let rate = u32_at(&bytes, 12);
        if bins != config.keep_bins {
            return Err(Error::format(
                4,
                format!("cache has {bins} bins, config expects {}", config.keep_bins),
            ));
        }
        let want = spg_file_len(bins, frames);
        if (bytes.len() as u64) != want || bins == 0 || frames == 0 {
            return Err(Error::format(
                bytes.len() as u64,
                format!("expected {want} bytes for {bins}x{frames} grid"),
            ));
        }
        let mut grid = vec![0.0f64; bins * frames];
        for t in 0..frames {
            for f in 0..bins {
                let at = 16 + 4 * (t * bins + f);
                let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
                grid[f * frames + t] = v as f64;
            }
        }
        Ok(Self {
            grid: Tensor::new(vec![bins, frames], grid)?,
            config,
            sample_rate_hz: rate,
        })
    }
}

pub fn spg_file_len(bins: usize, frames: usize) -> u64 {
    16 + 4 * (bins as u64) * (frames as u64)
}

pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}

/// Header facts of a PCM WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub sample_rate_hz: u32,
    pub num_samples: usize,
    data_offset: usize,
}

fn parse_wav_header(bytes: &[u8], total_len: usize) -> Result<WavInfo> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "truncated RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::format(0, "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::format(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(Error::format(body as u64, "truncated fmt chunk"));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let bits = u16_at(bytes, body + 14);
                if format != 1 {
                    return Err(Error::format(
                        body as u64,
                        format!("audio format {format} unsupported (PCM only)"),
                    ));
                }
                if channels != 1 {
                    return Err(Error::format(
                        (body + 2) as u64,
                        format!("channels={channels} unsupported"),
                    ));
                }
                if bits != 16 {
                    return Err(Error::format(
                        (body + 14) as u64,
                        format!("bits_per_sample={bits} unsupported"),
                    ));
                }
                rate = Some(u32_at(bytes, body + 4));
            }
            b"data" => {
                let Some(sample_rate_hz) = rate else {
                    return Err(Error::format(pos as u64, "data chunk before fmt chunk"));
                };
                if body + size > total_len {
                    return Err(Error::format(
                        total_len as u64,
                        format!("data chunk declares {size} bytes, file ends early"),
                    ));
                }
                if sample_rate_hz == 0 {
                    return Err(Error::format(24, "sample rate 0"));
                }
                return Ok(WavInfo {
                    sample_rate_hz,
                    num_samples: size / 2,
                    data_offset: body,
                });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(Error::format(pos as u64, "no data chunk"))
}

/// Reads the header without decoding samples. Falls back to the whole file
/// when the data chunk sits past the first few kilobytes.
pub fn wav_info(path: &Path) -> Result<WavInfo> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let mut head = Vec::new();
    Read::by_ref(&mut f)
        .take(4096)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    match parse_wav_header(&head, len) {
        Ok(info) => Ok(info),
        Err(_) if head.len() < len => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_wav_header(&bytes, len)
        }
        Err(e) => Err(e),
    }
}

pub fn read_wav(path: &Path) -> Result<SampleBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<SampleBuffer> {
    let info = parse_wav_header(bytes, bytes.len())?;
    let body = &bytes[info.data_offset..info.data_offset + 2 * info.num_samples];
    let samples = body
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 * PCM_SCALE)
        .collect();
    Ok(SampleBuffer {
        samples,
        sample_rate_hz: info.sample_rate_hz,
    })
}

/// 16-bit PCM mono encoding; samples are clipped to [-1, 1).
pub fn encode_wav(buf: &SampleBuffer) -> Vec<u8> {
    let data_len = 2 * buf.samples.len() as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buf.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(buf.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &buf.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, buf: &SampleBuffer) -> Result<()> {
    fs::write(path, encode_wav(buf)).map_err(|e| Error::io(path, e))
}

/// Symmetric Hamming window, `0.54 - 0.46 cos(2πk/(n-1))`.
pub fn hamming_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::arg(format!("hamming window length {n} < 2")));
    }
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / denom).cos())
        .collect())
}

/// Splits into windowed frames; the trailing partial frame is dropped.
pub fn frame_signal(buf: &SampleBuffer, cfg: &SpectrogramConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate(buf.sample_rate_hz)?;
    let win = cfg.window_samples(buf.sample_rate_hz);
    let shift = cfg.shift_samples(buf.sample_rate_hz);
    if buf.samples.len() < win {
        return Err(Error::TooShort {
            samples: buf.samples.len(),
            required: win,
        });
    }
    let window = hamming_window(win)?;
    let frames = cfg.num_frames(buf.samples.len(), buf.sample_rate_hz);
    Ok((0..frames)
        .map(|i| {
            buf.samples[i * shift..i * shift + win]
                .iter()
                .zip(&window)
                .map(|(x, w)| x * w)
                .collect()
        })
        .collect())
}

/// Direct DFT with a precomputed twiddle table. Only bins `0..=len/2` are
/// produced since the input is real.
#[derive(Debug, Clone)]
pub struct DftPlan {
    len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl DftPlan {
    pub fn new(len: usize) -> Self {
        let step = 2.0 * PI / len as f64;
        Self {
            len,
            cos: (0..len).map(|m| (step * m as f64).cos()).collect(),
            sin: (0..len).map(|m| (step * m as f64).sin()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Magnitudes of the first `bins` DFT coefficients of `frame`, implicitly
    /// zero-padded to the plan length.
    pub fn magnitudes(&self, frame: &[f64], bins: usize) -> Result<Vec<f64>> {
        if frame.len() > self.len {
            return Err(Error::arg(format!(
                "frame of {} samples exceeds DFT length {}",
                frame.len(),
                self.len
            )));
        }
        let bins = bins.min(self.len / 2 + 1);
        let mut out = Vec::with_capacity(bins);
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            let mut m = 0usize;
            for &x in frame {
                re += x * self.cos[m];
                im -= x * self.sin[m];
                m += k;
                if m >= self.len {
                    m -= self.len;
                }
            }
            out.push(re.hypot(im));
        }
        Ok(out)
    }
}

pub fn dft_magnitude(frame: &[f64], dft_len: usize) -> Result<Vec<f64>> {
    if dft_len == 0 {
        return Err(Error::arg("DFT length 0"));
    }
    DftPlan::new(dft_len).magnitudes(frame, dft_len / 2 + 1)
}

pub fn spectrogram(buf: &SampleBuffer, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    let frames = frame_signal(buf, cfg)?;
    let plan = DftPlan::new(cfg.dft_len);
    let n = frames.len();
    let mut grid = vec![0.0; cfg.keep_bins * n];
    for (t, frame) in frames.iter().enumerate() {
        for (f, m) in plan.magnitudes(frame, cfg.keep_bins)?.into_iter().enumerate() {
            grid[f * n + t] = m;
        }
    }
    Ok(Spectrogram {
        grid: Tensor::new(vec![cfg.keep_bins, n], grid)?,
        config: *cfg,
        sample_rate_hz: buf.sample_rate_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, secs: f64, rate: u32) -> SampleBuffer {
        let n = (secs * rate as f64) as usize;
        SampleBuffer {
            samples: (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).cos())
                .collect(),
            sample_rate_hz: rate,
        }
    }

    #[test]
    fn pcm_scaling_and_length() {
        let buf = SampleBuffer {
            samples: vec![0.5; 16000],
            sample_rate_hz: 16000,
        };
        let bytes = encode_wav(&buf);
        // 0.5 encodes as 16384
        assert_eq!(i16::from_le_bytes([bytes[44], bytes[45]]), 16384);
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.samples.len(), 16000);
        assert_eq!(back.sample_rate_hz, 16000);
        assert_eq!(back.samples[0], 0.5);
    }

    #[test]
    fn stereo_is_rejected() {
        let mut bytes = encode_wav(&SampleBuffer {
            samples: vec![0.0; 8],
            sample_rate_hz: 16000,
        });
        bytes[22] = 2;
        let err = decode_wav(&bytes).unwrap_err().to_string();
        assert!(err.contains("channels=2 unsupported"), "{err}");
        assert!(err.contains("byte 22"), "{err}");
    }

    #[test]
    fn non_pcm_and_truncated_are_rejected() {
        let good = encode_wav(&SampleBuffer {
            samples: vec![0.1; 100],
            sample_rate_hz: 8000,
        });
        let mut float = good.clone();
        float[20] = 3;
        assert!(decode_wav(&float).unwrap_err().to_string().contains("PCM only"));
        let cut = &good[..good.len() - 10];
        assert!(matches!(decode_wav(cut), Err(Error::Format { .. })));
        assert!(matches!(decode_wav(&good[..20]), Err(Error::Format { .. })));
    }

    #[test]
    fn wav_info_matches_decode() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(
            &p,
            &SampleBuffer {
                samples: vec![0.25; 1234],
                sample_rate_hz: 22050,
            },
        )
        .unwrap();
        let info = wav_info(&p).unwrap();
        assert_eq!(info.num_samples, 1234);
        assert_eq!(info.sample_rate_hz, 22050);
    }

    #[test]
    fn hamming_endpoints_and_symmetry() {
        let w3 = hamming_window(3).unwrap();
        assert!((w3[0] - 0.08).abs() < 1e-12 && (w3[2] - 0.08).abs() < 1e-12);
        assert!((w3[1] - 1.0).abs() < 1e-12);
        let w5 = hamming_window(5).unwrap();
        assert!((w5[0] - 0.08).abs() < 1e-12 && (w5[4] - 0.08).abs() < 1e-12);
        assert!((w5[2] - 1.0).abs() < 1e-12);
        let w = hamming_window(640).unwrap();
        for k in 0..640 {
            assert!((w[k] - w[639 - k]).abs() < 1e-12);
        }
        assert!(hamming_window(1).is_err());
    }

    #[test]
    fn frame_counts() {
        let cfg = SpectrogramConfig::default();
        let mk = |n| SampleBuffer {
            samples: vec![0.0; n],
            sample_rate_hz: 16000,
        };
        assert_eq!(frame_signal(&mk(16000), &cfg).unwrap().len(), 97);
        assert_eq!(frame_signal(&mk(640), &cfg).unwrap().len(), 1);
        assert!(matches!(
            frame_signal(&mk(639), &cfg),
            Err(Error::TooShort {
                samples: 639,
                required: 640
            })
        ));
    }

    #[test]
    fn frames_are_windowed_slices() {
        let cfg = SpectrogramConfig::default();
        let buf = SampleBuffer {
            samples: (0..2000).map(|i| i as f64 / 2000.0).collect(),
            sample_rate_hz: 16000,
        };
        let frames = frame_signal(&buf, &cfg).unwrap();
        let w = hamming_window(640).unwrap();
        assert_eq!(frames[2][5], buf.samples[2 * 160 + 5] * w[5]);
    }

    #[test]
    fn dft_of_constant_and_cosine() {
        let ones = dft_magnitude(&[1.0; 800], 800).unwrap();
        assert_eq!(ones.len(), 401);
        assert!((ones[0] - 800.0).abs() < 1e-9);
        assert!(ones[1..].iter().all(|&m| m < 1e-9));

        let cosine: Vec<f64> = (0..800)
            .map(|n| (2.0 * PI * 20.0 * n as f64 / 800.0).cos())
            .collect();
        let mags = dft_magnitude(&cosine, 800).unwrap();
        for (k, &m) in mags.iter().enumerate() {
            let want = if k == 20 { 400.0 } else { 0.0 };
            assert!((m - want).abs() < 1e-9, "bin {k}: {m}");
        }

        assert!(dft_magnitude(&[0.0; 640], 800).unwrap().iter().all(|&m| m == 0.0));
        assert!(dft_magnitude(&[0.0; 801], 800).is_err());
    }

    #[test]
    fn one_second_grid_shape() {
        let s = spectrogram(&tone(400.0, 1.0, 16000), &SpectrogramConfig::default()).unwrap();
        assert_eq!(s.grid.shape(), &[200, 97]);
        assert!(s.grid.data().iter().all(|&m| m >= 0.0));
    }

    // Brute-force DFT over one frame, independent of the twiddle tables.
    fn oracle_peak_bin(frame: &[f64], dft_len: usize, bins: usize) -> usize {
        let mut best = (0, -1.0);
        for k in 0..bins {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (n, &x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * (k * n) as f64 / dft_len as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            let m = (re * re + im * im).sqrt();
            if m > best.1 {
                best = (k, m);
            }
        }
        best.0
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        let cfg = SpectrogramConfig::default();
        let buf = tone(400.0, 1.0, 16000);
        let frames = frame_signal(&buf, &cfg).unwrap();
        let expected = oracle_peak_bin(&frames[0], 800, 200);
        assert!(expected.abs_diff(20) <= 1);
        let s = spectrogram(&buf, &cfg).unwrap();
        let peaks = s.grid.reduce(0, crate::tensor::ReduceOp::Argmax).unwrap();
        for &p in peaks.data() {
            assert_eq!(p as usize, expected);
        }
    }

    #[test]
    fn silence_gives_zero_grid() {
        let buf = SampleBuffer {
            samples: vec![0.0; 4000],
            sample_rate_hz: 16000,
        };
        let s = spectrogram(&buf, &SpectrogramConfig::default()).unwrap();
        assert!(s.grid.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn magnitudes_scale_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let buf = SampleBuffer {
            samples: (0..3000).map(|_| rng.random_range(-0.4..0.4)).collect(),
            sample_rate_hz: 16000,
        };
        let scaled = SampleBuffer {
            samples: buf.samples.iter().map(|x| -2.5 * x).collect(),
            ..buf.clone()
        };
        let cfg = SpectrogramConfig::default();
        let a = spectrogram(&buf, &cfg).unwrap();
        let b = spectrogram(&scaled, &cfg).unwrap();
        for (x, y) in a.grid.data().iter().zip(b.grid.data()) {
            assert!((2.5 * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn frame_count_formula_on_random_lengths() {
        let cfg = SpectrogramConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(640..50_000usize);
            let buf = SampleBuffer {
                samples: vec![0.0; n],
                sample_rate_hz: 16000,
            };
            let frames = frame_signal(&buf, &cfg).unwrap();
            assert_eq!(frames.len(), (n - 640) / 160 + 1);
        }
    }

    #[test]
    fn spg_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.spg");
        let cfg = SpectrogramConfig {
            keep_bins: 3,
            ..Default::default()
        };
        let s = Spectrogram {
            grid: Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            config: cfg,
            sample_rate_hz: 16000,
        };
        s.write_spg(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"SPG1");
        assert_eq!(bytes.len() as u64, spg_file_len(3, 2));
        // time-major: frame 0 holds bins (1, 3, 5)
        let first: Vec<f32> = bytes[16..28]
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(first, vec![1.0, 3.0, 5.0]);
        assert_eq!(Spectrogram::read_spg(&p, cfg).unwrap(), s);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(Spectrogram::read_spg(&p, cfg).unwrap_err().to_string().contains("bad magic"));
    }
}
