//! Synthetic multi-domain presentation-attack data.
//!
//! Every image is a smooth low-frequency "face" pattern. Bonafide images add a
//! domain-invariant checkerboard at the highest spatial frequency (the
//! liveness texture). Print attacks replace it with a blurred copy of the whole
//! image plus a colour cast; replay attacks replace it with a moiré grating.
//! Each domain then applies a label-blind style transform: per-channel shift,
//! contrast, a low-frequency background wave and pixel noise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ImageShape, ATTACK, BONAFIDE};
use crate::real::{self, Real, PI};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttackType {
    None,
    Print,
    Replay,
}

impl AttackType {
    pub fn code(self) -> u8 {
        match self {
            AttackType::None => 0,
            AttackType::Print => 1,
            AttackType::Replay => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(AttackType::None),
            1 => Ok(AttackType::Print),
            2 => Ok(AttackType::Replay),
            other => Err(Error::Data(format!("unknown attack code {other}"))),
        }
    }
}

/// Label-independent appearance of one capture domain.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Style {
    pub channel_shift: Vec<Real>,
    pub contrast: Real,
    pub noise_sigma: Real,
    pub background_amplitude: Real,
    pub background_phase: Real,
    pub background_angle: Real,
}

impl Style {
    pub fn neutral(channels: usize, noise_sigma: Real) -> Self {
        Self {
            channel_shift: vec![0.0; channels],
            contrast: 1.0,
            noise_sigma,
            background_amplitude: 0.0,
            background_phase: 0.0,
            background_angle: 0.0,
        }
    }

    /// Style drawn from a stream keyed by `(style_seed, domain)`; `strength`
    /// scales every deviation from neutral.
    pub fn sampled(domain: u16, strength: Real, noise_sigma: Real, channels: usize, style_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
        rng.set_stream(domain as u64 + 1);
        let channel_shift = (0..channels).map(|_| rng.random_range(-0.15..0.15) * strength).collect();
        let contrast = real::exp(rng.random_range(-0.35..0.35) * strength);
        let background_amplitude = 0.12 * strength * rng.random_range(0.5..1.0);
        Self {
            channel_shift,
            contrast,
            noise_sigma,
            background_amplitude,
            background_phase: rng.random_range(0.0..2.0 * PI),
            background_angle: rng.random_range(0.0..PI),
        }
    }

    /// Applies the style to an image in place. Never sees the label.
    fn apply(&self, shape: ImageShape, image: &mut [Real], rng: &mut impl Rng) {
        let (h, w, c) = (shape.height, shape.width, shape.channels);
        let (ca, sa) = (real::cos(self.background_angle), real::sin(self.background_angle));
        for i in 0..h {
            for j in 0..w {
                let (u, v) = (i as Real / h as Real, j as Real / w as Real);
                let bg = self.background_amplitude * real::sin(2.0 * PI * (u * ca + v * sa) + self.background_phase);
                for ch in 0..c {
                    let px = &mut image[(i * w + j) * c + ch];
                    let noise = if self.noise_sigma > 0.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        self.noise_sigma * z as Real
                    } else {
                        0.0
                    };
                    *px = (self.contrast * (*px - 0.5) + 0.5 + self.channel_shift[ch] + bg + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Strength of the attack-specific artifacts, independent of the liveness
/// amplitude.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Artifacts {
    pub print_cast: Real,
    pub replay_moire: Real,
}

impl Default for Artifacts {
    fn default() -> Self {
        Self {
            print_cast: 0.08,
            replay_moire: 0.08,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassCounts {
    pub bonafide: usize,
    pub print: usize,
    pub replay: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.bonafide + self.print + self.replay
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DomainSpec {
    pub id: u16,
    pub style: Style,
    pub counts: ClassCounts,
    pub image: ImageShape,
    /// Frames sharing one underlying presentation (one group id).
    pub frames_per_group: usize,
    pub artifacts: Artifacts,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let s = &self.style;
        if !(s.noise_sigma >= 0.0) || !(s.contrast > 0.0) {
            return Err(Error::Config(format!("domain {}: noise must be >= 0 and contrast > 0", self.id)));
        }
        if s.channel_shift.len() != self.image.channels {
            return Err(Error::Config(format!("domain {}: one shift per channel required", self.id)));
        }
        let c = self.counts;
        if c.bonafide == 0 || c.print + c.replay == 0 || self.frames_per_group == 0 || self.image.numel() == 0 {
            return Err(Error::Config(format!("domain {}: counts and shape must be positive", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `H × W × C`, values in `[0, 1]`.
    pub image: Vec<Real>,
    /// 0 attack, 1 bonafide.
    pub label: u8,
    pub domain: u16,
    pub attack: AttackType,
    pub group: u32,
    /// Unique across domains: `domain << 32 | position in the generated set`.
    pub uid: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: u16,
    pub image: ImageShape,
    pub samples: Vec<SyntheticSample>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> ClassCounts {
        let mut c = ClassCounts {
            bonafide: 0,
            print: 0,
            replay: 0,
        };
        for s in &self.samples {
            match s.attack {
                AttackType::None => c.bonafide += 1,
                AttackType::Print => c.print += 1,
                AttackType::Replay => c.replay += 1,
            }
        }
        c
    }

    /// Stacks the given samples into `[B, H, W, C]` plus class labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.image;
        let mut data = Vec::with_capacity(indices.len() * s.numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let sample = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample {i} out of range for {} samples", self.len())))?;
            data.extend_from_slice(&sample.image);
            labels.push(sample.label as usize);
        }
        Ok((Tensor::new(&[indices.len(), s.height, s.width, s.channels], data)?, labels))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.len() != self.image.numel() {
                return Err(Error::Data(format!("sample {i}: image has {} values", s.image.len())));
            }
            if (s.label == BONAFIDE as u8) != (s.attack == AttackType::None) || s.label > 1 {
                return Err(Error::Data(format!("sample {i}: label {} inconsistent with {:?}", s.label, s.attack)));
            }
            if s.image.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("sample {i}: non-finite pixel")));
            }
        }
        Ok(())
    }
}

/// Content shared by every frame of one group.
#[derive(Clone, Debug)]
pub struct Presentation {
    freqs: [Real; 4],
    phases: [Real; 2],
    tint: Vec<Real>,
    cast: Vec<Real>,
    moire_freq: Real,
    moire_angle: Real,
    moire_phase: Real,
}

impl Presentation {
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let cast_dir = [1.0, 0.4, -0.8];
        let cast_scale = rng.random_range(0.6..1.0);
        Self {
            freqs: [
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
            ],
            phases: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
            tint: (0..channels).map(|_| rng.random_range(-0.05..0.05)).collect(),
            cast: (0..channels).map(|c| cast_dir[c % 3] * cast_scale).collect(),
            moire_freq: rng.random_range(0.15..0.3),
            moire_angle: rng.random_range(0.0..PI),
            moire_phase: rng.random_range(0.0..2.0 * PI),
        }
    }
}

/// Renders one frame before styling. `jitter` shifts the face pattern phase.
pub fn render_content(
    shape: ImageShape,
    p: &Presentation,
    attack: AttackType,
    amplitude: Real,
    artifacts: Artifacts,
    jitter: Real,
) -> Vec<Real> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut img = vec![0.0; shape.numel()];
    for i in 0..h {
        for j in 0..w {
            let (u, v) = (i as Real / h as Real, j as Real / w as Real);
            let face = 0.5
                + 0.12 * real::sin(2.0 * PI * (p.freqs[0] * u + p.freqs[1] * v) + p.phases[0] + jitter)
                + 0.08 * real::cos(2.0 * PI * (p.freqs[2] * u - p.freqs[3] * v) + p.phases[1]);
            let checker = if (i + j) % 2 == 0 { 0.5 } else { -0.5 } * amplitude;
            for ch in 0..c {
                let idx = (i * w + j) * c + ch;
                img[idx] = face + p.tint[ch];
                match attack {
                    AttackType::None | AttackType::Print => img[idx] += checker,
                    AttackType::Replay => {
                        let t = i as Real * real::cos(p.moire_angle) + j as Real * real::sin(p.moire_angle);
                        img[idx] += artifacts.replay_moire * real::sin(2.0 * PI * p.moire_freq * t + p.moire_phase);
                    }
                }
            }
        }
    }
    if attack == AttackType::Print {
        img = box_blur(shape, &img);
        for px in img.chunks_exact_mut(c) {
            px.iter_mut().zip(&p.cast).for_each(|(v, k)| *v += artifacts.print_cast * k);
        }
    }
    img
}

/// 3×3 mean filter with edge replication.
fn box_blur(shape: ImageShape, img: &[Real]) -> Vec<Real> {
    let (h, w, c) = (shape.height as isize, shape.width as isize, shape.channels);
    let mut out = vec![0.0; img.len()];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (y, x) = ((i + di).clamp(0, h - 1), (j + dj).clamp(0, w - 1));
                        acc += img[((y * w + x) as usize) * c + ch];
                    }
                }
                out[((i * w + j) as usize) * c + ch] = acc / 9.0;
            }
        }
    }
    out
}

/// Generates a domain deterministically from `(spec, amplitude, seed)`.
pub fn generate(spec: &DomainSpec, amplitude: Real, seed: u64) -> Result<DomainDataset> {
    spec.validate()?;
    if !(amplitude >= 0.0) {
        return Err(Error::Config(format!("class signal amplitude must be >= 0, got {amplitude}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(spec.id as u64);
    let shape = spec.image;
    let mut samples = Vec::with_capacity(spec.counts.total());
    let mut group = 0u32;
    let classes = [
        (AttackType::None, spec.counts.bonafide),
        (AttackType::Print, spec.counts.print),
        (AttackType::Replay, spec.counts.replay),
    ];
    for (attack, count) in classes {
        let label = if attack == AttackType::None { BONAFIDE } else { ATTACK } as u8;
        let mut remaining = count;
        while remaining > 0 {
            let frames = remaining.min(spec.frames_per_group);
            let pres = Presentation::random(shape.channels, &mut rng);
            for _ in 0..frames {
                let jitter = rng.random_range(-0.15..0.15);
                let mut image = render_content(shape, &pres, attack, amplitude, spec.artifacts, jitter);
                spec.style.apply(shape, &mut image, &mut rng);
                let uid = ((spec.id as u64) << 32) | samples.len() as u64;
                samples.push(SyntheticSample {
                    image,
                    label,
                    domain: spec.id,
                    attack,
                    group: ((spec.id as u32) << 16) | group,
                    uid,
                });
            }
            remaining -= frames;
            group += 1;
        }
    }
    Ok(DomainDataset {
        domain: spec.id,
        image: shape,
        samples,
    })
}

/// `count` domains with ids `0..count`, sampled styles and equal class counts.
pub fn domain_specs(
    count: u16,
    image: ImageShape,
    counts: ClassCounts,
    style_strength: Real,
    noise_sigma: Real,
    style_seed: u64,
    frames_per_group: usize,
) -> Vec<DomainSpec> {
    (0..count)
        .map(|id| DomainSpec {
            id,
            style: Style::sampled(id, style_strength, noise_sigma, image.channels, style_seed),
            counts,
            image,
            frames_per_group,
            artifacts: Artifacts::default(),
        })
        .collect()
}

/// Applies a domain style to an arbitrary image, for label-independence checks.
pub fn stylize(style: &Style, shape: ImageShape, image: &mut [Real], rng: &mut impl Rng) {
    style.apply(shape, image, rng);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    PerDomain,
    PerDomainPerAttack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub clients: Vec<DomainDataset>,
    pub target: DomainDataset,
    pub mode: PartitionMode,
}

/// Every domain but `target` becomes one client.
pub fn leave_one_out(domains: &[DomainDataset], target: u16) -> Result<PartitionPlan> {
    if domains.len() < 2 {
        return Err(Error::Config(format!("leave-one-out needs at least 2 domains, got {}", domains.len())));
    }
    let held = domains
        .iter()
        .find(|d| d.domain == target)
        .ok_or_else(|| Error::Config(format!("target domain {target} not among the generated domains")))?;
    Ok(PartitionPlan {
        clients: domains.iter().filter(|d| d.domain != target).cloned().collect(),
        target: held.clone(),
        mode: PartitionMode::PerDomain,
    })
}

/// Splits every client in two: print attacks with the first half of the
/// bonafide groups, replay attacks with the rest.
pub fn split_by_attack(plan: &PartitionPlan) -> Result<PartitionPlan> {
    if plan.mode != PartitionMode::PerDomain {
        return Err(Error::Config("plan is already split by attack".into()));
    }
    let mut clients = Vec::with_capacity(plan.clients.len() * 2);
    for client in &plan.clients {
        let mut bonafide_groups: BTreeMap<u32, ()> = BTreeMap::new();
        for s in client.samples.iter().filter(|s| s.attack == AttackType::None) {
            bonafide_groups.insert(s.group, ());
        }
        let counts = client.counts();
        if counts.print == 0 || counts.replay == 0 {
            return Err(Error::Data(format!("domain {} lacks an attack type: {counts:?}", client.domain)));
        }
        if bonafide_groups.len() < 2 {
            return Err(Error::Data(format!("domain {} has fewer than 2 bonafide groups", client.domain)));
        }
        let cut = *bonafide_groups.keys().nth(bonafide_groups.len().div_ceil(2)).unwrap();
        for attack in [AttackType::Print, AttackType::Replay] {
            let samples = client
                .samples
                .iter()
                .filter(|s| match s.attack {
                    AttackType::None => (s.group < cut) == (attack == AttackType::Print),
                    a => a == attack,
                })
                .cloned()
                .collect();
            clients.push(DomainDataset {
                domain: client.domain,
                image: client.image,
                samples,
            });
        }
    }
    Ok(PartitionPlan {
        clients,
        target: plan.target.clone(),
        mode: PartitionMode::PerDomainPerAttack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn spec(id: u16, strength: Real) -> DomainSpec {
        let image = ImageShape {
            height: 16,
            width: 16,
            channels: 3,
        };
        DomainSpec {
            id,
            style: Style::sampled(id, strength, 0.05, 3, 7),
            counts: ClassCounts {
                bonafide: 12,
                print: 7,
                replay: 5,
            },
            image,
            frames_per_group: 4,
            artifacts: Artifacts::default(),
        }
    }

    #[test]
    fn class_counts_match_spec_exactly() {
        let s = spec(1, 1.0);
        let d = generate(&s, 0.5, 3).unwrap();
        assert_eq!(d.counts(), s.counts);
        d.validate().unwrap();
        assert!(d.samples.iter().all(|x| x.image.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(d.samples.iter().all(|x| (x.label == 1) == (x.attack == AttackType::None)));
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(2, 1.0);
        assert_eq!(generate(&s, 0.5, 11).unwrap(), generate(&s, 0.5, 11).unwrap());
        assert_ne!(generate(&s, 0.5, 11).unwrap(), generate(&s, 0.5, 12).unwrap());
    }

    #[test]
    fn domains_get_distinct_styles() {
        assert_ne!(spec(0, 1.0).style, spec(1, 1.0).style);
        assert_eq!(Style::sampled(3, 1.0, 0.05, 3, 7), Style::sampled(3, 1.0, 0.05, 3, 7));
    }

    #[test]
    fn zero_amplitude_leaves_only_attack_artifacts() {
        let shape = spec(0, 0.0).image;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Presentation::random(3, &mut rng);
        let art = Artifacts::default();
        let bona = render_content(shape, &p, AttackType::None, 0.0, art, 0.1);
        let replay = render_content(shape, &p, AttackType::Replay, 0.0, art, 0.1);
        let no_art = Artifacts {
            print_cast: 0.0,
            replay_moire: 0.0,
        };
        assert_eq!(render_content(shape, &p, AttackType::Replay, 0.0, no_art, 0.1), bona);
        assert_ne!(replay, bona);
        // Print differs from bonafide only through blur and cast.
        let print_no_cast = render_content(shape, &p, AttackType::Print, 0.0, no_art, 0.1);
        assert_eq!(print_no_cast, box_blur(shape, &bona));
        // With a positive amplitude the bonafide image carries the checkerboard.
        let live = render_content(shape, &p, AttackType::None, 0.4, art, 0.1);
        assert!((live[0] - bona[0] - 0.2).abs() < 1e-12);
        assert!((live[3] - bona[3] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn style_is_label_blind() {
        // The same content styled with the same noise stream gives the same image
        // no matter which label it will carry.
        let s = spec(0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Presentation::random(3, &mut rng);
        let content = render_content(s.image, &p, AttackType::None, 0.5, s.artifacts, 0.0);
        let (mut a, mut b) = (content.clone(), content);
        stylize(&s.style, s.image, &mut a, &mut ChaCha8Rng::seed_from_u64(1));
        stylize(&s.style, s.image, &mut b, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    fn four_domains() -> Vec<DomainDataset> {
        (0..4).map(|i| generate(&spec(i, 1.0), 0.5, 1).unwrap()).collect()
    }

    #[test]
    fn leave_one_out_holds_the_target_out() {
        let ds = four_domains();
        let plan = leave_one_out(&ds, 3).unwrap();
        assert_eq!(plan.clients.len(), 3);
        let target: BTreeSet<u64> = plan.target.samples.iter().map(|s| s.uid).collect();
        for c in &plan.clients {
            assert!(c.samples.iter().all(|s| !target.contains(&s.uid)));
        }
        assert_eq!(leave_one_out(&ds[..2], 0).unwrap().clients.len(), 1);
        assert!(leave_one_out(&ds[..1], 0).is_err());
        assert!(leave_one_out(&ds, 9).is_err());
    }

    #[test]
    fn split_by_attack_partitions_each_client() {
        let plan = leave_one_out(&four_domains(), 0).unwrap();
        let split = split_by_attack(&plan).unwrap();
        assert_eq!(split.clients.len(), 6);
        for (k, original) in plan.clients.iter().enumerate() {
            let (a, b) = (&split.clients[2 * k], &split.clients[2 * k + 1]);
            let ua: BTreeSet<u64> = a.samples.iter().map(|s| s.uid).collect();
            let ub: BTreeSet<u64> = b.samples.iter().map(|s| s.uid).collect();
            let uo: BTreeSet<u64> = original.samples.iter().map(|s| s.uid).collect();
            assert!(ua.is_disjoint(&ub));
            assert_eq!(ua.union(&ub).copied().collect::<BTreeSet<_>>(), uo);
            assert!(a.samples.iter().all(|s| s.attack != AttackType::Replay));
            assert!(b.samples.iter().all(|s| s.attack != AttackType::Print));
            assert!(a.counts().bonafide > 0 && b.counts().bonafide > 0);
        }
        assert!(split_by_attack(&split).is_err());
    }

    #[test]
    fn split_requires_both_attacks() {
        let mut s = spec(1, 1.0);
        s.counts.replay = 0;
        let d = vec![generate(&s, 0.5, 0).unwrap(), generate(&spec(2, 1.0), 0.5, 0).unwrap()];
        let plan = leave_one_out(&d, 2).unwrap();
        assert!(matches!(split_by_attack(&plan), Err(Error::Data(_))));
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(0, 1.0);
        s.style.contrast = 0.0;
        assert!(generate(&s, 0.5, 0).is_err());
        let s = spec(0, 1.0);
        assert!(generate(&s, -0.1, 0).is_err());
    }
}
