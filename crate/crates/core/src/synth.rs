//! Deterministic synthetic audio: an unlabeled pretraining corpus and small
//! labeled classification tasks for probing.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng, Stream};

const SR: f64 = SAMPLE_RATE as f64;

fn harmonic(len: usize, f0: impl Fn(f64) -> f64, harmonics: usize, rng: &mut Rng) -> Vec<f64> {
    let mut phase: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    (0..len)
        .map(|i| {
            let f = f0(i as f64 / SR);
            let mut s = 0.0;
            for (h, ph) in phase.iter_mut().enumerate() {
                let k = (h + 1) as f64;
                *ph += 2.0 * PI * f * k / SR;
                if f * k < SR / 2.0 {
                    s += ph.sin() / k;
                }
            }
            s
        })
        .collect()
}

/// White noise through a one-pole filter; `coef` near 1 is dark, negative is bright.
fn colored_noise(len: usize, coef: f64, rng: &mut Rng) -> Vec<f64> {
    let mut prev = 0.0;
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            prev = coef * prev + w;
            prev
        })
        .collect();
    normalize_peak(&mut out, 1.0);
    out
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

fn fade(x: &mut [f64], samples: usize) {
    let n = x.len();
    let k = samples.min(n / 2);
    for i in 0..k {
        let g = i as f64 / k as f64;
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
}

/// One segment of the pretraining corpus.
fn segment(len: usize, rng: &mut Rng) -> Vec<f64> {
    let kind = rng.gen_range(0..4);
    let mut s = match kind {
        0 => {
            let f0 = rng.gen_range(90.0..400.0);
            let vib = rng.gen_range(0.0..8.0);
            harmonic(len, move |t| f0 * (1.0 + 0.02 * (2.0 * PI * vib * t).sin()), 4, rng)
        }
        1 => {
            let (a, b): (f64, f64) = (rng.gen_range(150.0..1500.0), rng.gen_range(150.0..1500.0));
            let dur = len as f64 / SR;
            harmonic(len, move |t| a + (b - a) * t / dur, 2, rng)
        }
        2 => {
            let coef = rng.gen_range(-0.9..0.98);
            colored_noise(len, coef, rng)
        }
        _ => colored_noise(len, 0.0, rng),
    };
    let peak = if kind == 3 { 0.01 } else { rng.gen_range(0.2..0.8) };
    normalize_peak(&mut s, peak);
    fade(&mut s, 80);
    s
}

/// An utterance of concatenated tone, chirp, noise and near-silence segments.
pub fn synthetic_utterance(seconds: f64, rng: &mut Rng) -> Result<Waveform> {
    let len = (seconds * SR).round() as usize;
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let seg = rng.gen_range((0.08 * SR) as usize..(0.4 * SR) as usize).min(len - out.len());
        out.extend(segment(seg, rng));
    }
    Waveform::new(out)
}

/// `count` utterances with durations uniform in `seconds`.
pub fn synthetic_corpus(count: usize, seconds: [f64; 2], seed: u64) -> Result<Vec<Waveform>> {
    if !(seconds[0] > 0.0 && seconds[0] <= seconds[1]) {
        return Err(Error::InvalidArgument(format!("bad duration range {seconds:?}")));
    }
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Synth, i as u64);
            let d = if seconds[1] > seconds[0] {
                rng.gen_range(seconds[0]..=seconds[1])
            } else {
                seconds[0]
            };
            synthetic_utterance(d, &mut rng)
        })
        .collect()
}

/// Writes `corpus` as numbered WAV files plus `manifest.txt` in `dir`.
pub fn write_corpus(dir: &Path, corpus: &[Waveform]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, w) in corpus.iter().enumerate() {
        let name = format!("utt{i:05}.wav");
        write_wav(&dir.join(&name), w)?;
        manifest += &name;
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Four-class toy classification tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyTask {
    /// Pure tones in four octave-spaced bands.
    Tones,
    /// Up or down sweeps, slow or fast.
    Chirps,
    /// Dark, white, bright and amplitude-modulated noise.
    Textures,
}

impl ToyTask {
    pub const ALL: [ToyTask; 3] = [ToyTask::Tones, ToyTask::Chirps, ToyTask::Textures];

    pub fn name(self) -> &'static str {
        match self {
            ToyTask::Tones => "tones",
            ToyTask::Chirps => "chirps",
            ToyTask::Textures => "textures",
        }
    }

    pub fn num_classes(self) -> usize {
        4
    }

    fn render(self, class: usize, len: usize, rng: &mut Rng) -> Vec<f64> {
        let dur = len as f64 / SR;
        let mut x = match self {
            ToyTask::Tones => {
                let f = 200.0 * 2f64.powi(class as i32) * rng.gen_range(0.9..1.1);
                harmonic(len, move |_| f, 1, rng)
            }
            ToyTask::Chirps => {
                let (lo, hi) = (rng.gen_range(200.0..400.0), rng.gen_range(1200.0..2400.0));
                let rate = if class % 2 == 0 { 1.0 } else { 4.0 };
                let up = class < 2;
                harmonic(
                    len,
                    move |t| {
                        let u = (rate * t / dur).fract();
                        if up {
                            lo + (hi - lo) * u
                        } else {
                            hi - (hi - lo) * u
                        }
                    },
                    1,
                    rng,
                )
            }
            ToyTask::Textures => match class {
                0 => colored_noise(len, 0.97, rng),
                1 => colored_noise(len, 0.0, rng),
                2 => colored_noise(len, -0.9, rng),
                _ => {
                    let am = rng.gen_range(3.0..6.0);
                    let mut n = colored_noise(len, 0.0, rng);
                    for (i, v) in n.iter_mut().enumerate() {
                        *v *= 0.5 + 0.5 * (2.0 * PI * am * i as f64 / SR).sin();
                    }
                    n
                }
            },
        };
        normalize_peak(&mut x, rng.gen_range(0.2..0.8));
        for v in x.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += 0.005 * n;
        }
        fade(&mut x, 80);
        x
    }
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?}; expected tones, chirps or textures")))
    }
}

/// `per_class` labeled examples of each class, interleaved by class.
pub fn toy_dataset(task: ToyTask, per_class: usize, seconds: [f64; 2], seed: u64) -> Result<Vec<(Waveform, usize)>> {
    let mut out = Vec::with_capacity(per_class * task.num_classes());
    for i in 0..per_class {
        for c in 0..task.num_classes() {
            let idx = (i * task.num_classes() + c) as u64;
            let mut rng = stream_rng(seed ^ 0x70b3, Stream::Synth, idx);
            let d = rng.gen_range(seconds[0]..=seconds[1]);
            let len = (d * SR).round() as usize;
            out.push((Waveform::new(task.render(c, len, &mut rng))?, c));
        }
    }
    Ok(out)
}
