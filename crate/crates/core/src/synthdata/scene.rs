use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{sample_seed, splitmix64, Category};
use crate::dsp::{FrameStack, LipBox, Waveform, CLIP_SAMPLES, FRAME_SIZE, LIP_SIZE, SAMPLE_RATE, VIDEO_FRAMES};
use crate::nets::Media;

pub const NOISE_STD: f64 = 0.01;
pub const FRAME_RATE: f64 = 25.0;
const HARMONICS: usize = 4;

const STREAM_SCENE: u64 = 0;
const STREAM_AUDIO_FAKE: u64 = 1;
const STREAM_VIDEO_FAKE: u64 = 2;
const STREAM_AUDIO_NOISE: u64 = 3;
const STREAM_VIDEO_NOISE: u64 = 4;
const SUBJECT_SALT: u64 = 0x5B1E_C7A1_D5EE_D000;

/// Quantised media exactly as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    /// PCM16 samples; value `q` decodes to `q / 32768`.
    pub audio: Vec<i16>,
    /// 8-bit pixels, frame-major; value `p` decodes to `p / 255`.
    pub frames: Vec<u8>,
    pub lip_box: LipBox,
}

impl Clip {
    pub fn to_media(&self) -> Media {
        Media {
            audio: Waveform {
                samples: self.audio.iter().map(|&q| q as f64 / 32768.0).collect(),
                sample_rate: SAMPLE_RATE,
            },
            video: FrameStack {
                frames: VIDEO_FRAMES,
                height: FRAME_SIZE,
                width: FRAME_SIZE,
                data: self.frames.iter().map(|&p| p as f64 / 255.0).collect(),
            },
            lip_box: self.lip_box,
        }
    }

    pub fn from_media(m: &Media) -> Self {
        Self {
            audio: m.audio.samples.iter().map(|&s| quantise_sample(s)).collect(),
            frames: m.video.data.iter().map(|&v| quantise_pixel(v)).collect(),
            lip_box: m.lip_box,
        }
    }
}

pub(crate) fn quantise_sample(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub(crate) fn quantise_pixel(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct AvSample {
    pub index: u64,
    pub subject_id: u32,
    pub category: Category,
    pub seed: u64,
    pub clip: Clip,
}

/// Per-identity constants: voice and face.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectTraits {
    pub f0: f64,
    pub harmonic_gains: [f64; HARMONICS],
    pub face_centre: (f64, f64),
    pub face_radius: f64,
    pub face_level: f64,
    pub background: f64,
    /// Smooth skin texture: cycles per frame along y and x, and phase.
    pub texture: (f64, f64, f64),
}

pub fn subject_traits(global_seed: u64, subject_id: u32) -> SubjectTraits {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(global_seed ^ SUBJECT_SALT) ^ subject_id as u64));
    let mut gains = [1.0; HARMONICS];
    for h in 1..HARMONICS {
        gains[h] = gains[h - 1] * rng.random_range(0.4..0.8);
    }
    SubjectTraits {
        f0: rng.random_range(100.0..220.0),
        harmonic_gains: gains,
        face_centre: (rng.random_range(14.0..18.0), rng.random_range(14.0..18.0)),
        face_radius: rng.random_range(11.0..13.0),
        face_level: rng.random_range(0.55..0.75),
        background: rng.random_range(0.15..0.3),
        texture: (
            rng.random_range(1.0..3.0),
            rng.random_range(1.0..3.0),
            rng.random_range(0.0..2.0 * PI),
        ),
    }
}

/// Loudness envelope in [0, 1].
#[derive(Clone, Copy, Debug)]
struct Envelope {
    freq: f64,
    phase: f64,
}

impl Envelope {
    fn draw(rng: &mut impl Rng) -> Self {
        Self {
            freq: rng.random_range(3.0..6.0),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn at(&self, t: f64) -> f64 {
        0.5 + 0.5 * (2.0 * PI * self.freq * t + self.phase).sin()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Synthesises one clip. The seed is derived from `(global_seed, index)`.
pub fn generate_sample(global_seed: u64, index: u64, subject_id: u32, category: Category) -> AvSample {
    let seed = sample_seed(global_seed, index);
    let subject = subject_traits(global_seed, subject_id);
    let mut scene = stream(seed, STREAM_SCENE);
    let speech = Envelope::draw(&mut scene);
    let loudness = scene.random_range(0.2..0.3);
    let phases: Vec<f64> = (0..HARMONICS).map(|_| scene.random_range(0.0..2.0 * PI)).collect();
    let lip_box = LipBox {
        top: scene.random_range(12..=16),
        left: scene.random_range(6..=10),
        height: LIP_SIZE,
        width: LIP_SIZE,
    };

    let mut audio_env = speech;
    let mut partial = None;
    if category.audio_fake() {
        let mut r = stream(seed, STREAM_AUDIO_FAKE);
        audio_env.phase = r.random_range(0.0..2.0 * PI);
        partial = Some((
            r.random_range(2000.0..4000.0),
            r.random_range(0.25..0.35),
            r.random_range(0.0..2.0 * PI),
        ));
    }
    let mut mouth_env = speech;
    let mut grain = None;
    if category.visual_fake() {
        let mut r = stream(seed, STREAM_VIDEO_FAKE);
        mouth_env = Envelope::draw(&mut r);
        grain = Some(r.random_range(0.04..0.08));
    }

    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let mut audio_noise = stream(seed, STREAM_AUDIO_NOISE);
    let audio = (0..CLIP_SAMPLES)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let voice: f64 = (0..HARMONICS)
                .map(|h| {
                    let f = subject.f0 * (h + 1) as f64;
                    subject.harmonic_gains[h] * (2.0 * PI * f * t + phases[h]).sin()
                })
                .sum();
            let mut s = loudness * audio_env.at(t) * voice / 2.0;
            if let Some((f, gain, ph)) = partial {
                s += loudness * gain * (2.0 * PI * f * t + ph).sin();
            }
            quantise_sample(s + noise.sample(&mut audio_noise))
        })
        .collect();

    let mut video_noise = stream(seed, STREAM_VIDEO_NOISE);
    let (cy, cx) = subject.face_centre;
    let (ty, tx, tp) = subject.texture;
    let mouth_cy = lip_box.top as f64 + LIP_SIZE as f64 / 2.0;
    let mouth_cx = lip_box.left as f64 + LIP_SIZE as f64 / 2.0;
    let mut frames = Vec::with_capacity(VIDEO_FRAMES * FRAME_SIZE * FRAME_SIZE);
    for k in 0..VIDEO_FRAMES {
        let opening = mouth_env.at((k as f64 + 0.5) / FRAME_RATE);
        for y in 0..FRAME_SIZE {
            for x in 0..FRAME_SIZE {
                let (fy, fx) = (y as f64, x as f64);
                let r = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                // soft-edged disc
                let face = 1.0 / (1.0 + ((r - subject.face_radius) * 1.5).exp());
                let skin = match grain {
                    Some(g) => {
                        if (x + y) % 2 == 0 {
                            g
                        } else {
                            -g
                        }
                    }
                    None => 0.03 * (2.0 * PI * (ty * fy + tx * fx) / FRAME_SIZE as f64 + tp).sin(),
                };
                let mut v = subject.background + face * (subject.face_level - subject.background + skin);
                let my = (fy - mouth_cy) / 3.0;
                let mx = (fx - mouth_cx) / 6.0;
                if my * my + mx * mx <= 1.0 {
                    v -= 0.4 * opening;
                }
                frames.push(quantise_pixel(v + noise.sample(&mut video_noise)));
            }
        }
    }

    AvSample {
        index,
        subject_id,
        category,
        seed,
        clip: Clip {
            audio,
            frames,
            lip_box,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mel_spectrogram, StftParams, LOG_FLOOR};

    fn l2(a: &[i16], b: &[i16]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| ((x as f64 - y as f64) / 32768.0).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn regeneration_is_identical() {
        for c in Category::ALL {
            assert_eq!(generate_sample(42, 5, 3, c), generate_sample(42, 5, 3, c));
        }
        assert_ne!(generate_sample(42, 5, 3, Category::RvRa), generate_sample(42, 6, 3, Category::RvRa));
    }

    #[test]
    fn audio_fake_leaves_frames_alone() {
        for index in 0..5 {
            let clean = generate_sample(42, index, 10, Category::RvRa).clip;
            let fake = generate_sample(42, index, 10, Category::RvFa).clip;
            assert_eq!(clean.frames, fake.frames);
            assert!(l2(&clean.audio, &fake.audio) > 0.1);
        }
    }

    #[test]
    fn visual_fake_leaves_audio_alone_and_changes_mouth() {
        for index in 0..5 {
            let clean = generate_sample(42, index, 10, Category::RvRa).clip;
            let fake = generate_sample(42, index, 10, Category::FvRa).clip;
            assert_eq!(clean.audio, fake.audio);
            let b = clean.lip_box;
            let n = FRAME_SIZE * FRAME_SIZE;
            let differs = (0..VIDEO_FRAMES).any(|t| {
                (0..n).any(|p| b.contains(p / FRAME_SIZE, p % FRAME_SIZE) && clean.frames[t * n + p] != fake.frames[t * n + p])
            });
            assert!(differs);
            let both = generate_sample(42, index, 10, Category::FvFa).clip;
            assert_eq!(both.frames, fake.frames);
            assert_eq!(both.audio, generate_sample(42, index, 10, Category::RvFa).clip.audio);
        }
    }

    #[test]
    fn clips_have_canonical_geometry() {
        let s = generate_sample(1, 0, 0, Category::FvFa);
        let m = s.clip.to_media();
        assert!(m.audio.is_canonical() && m.video.is_canonical());
        let b = s.clip.lip_box;
        assert!(b.top + b.height <= FRAME_SIZE && b.left + b.width <= FRAME_SIZE);
        assert_eq!(Clip::from_media(&m), s.clip);
    }

    #[test]
    fn inharmonic_partial_is_visible_in_high_bands() {
        let p = StftParams::default();
        let high_energy = |c: Category| {
            let m = generate_sample(9, 2, 4, c).clip.to_media();
            let mel = mel_spectrogram(&m.audio, 64, p, LOG_FLOOR).unwrap();
            let means = mel.bin_means();
            means[40..56].iter().cloned().fold(f64::MIN, f64::max)
        };
        assert!(high_energy(Category::RvFa) > high_energy(Category::RvRa) + 3.0);
    }

    #[test]
    fn subjects_have_distinct_voices() {
        let a = subject_traits(42, 1);
        let b = subject_traits(42, 2);
        assert_ne!(a.f0, b.f0);
        assert_eq!(a, subject_traits(42, 1));
        assert!((100.0..220.0).contains(&a.f0));
    }
}
