//! Synthetic identity world: rendered disk faces on captioned backgrounds,
//! the DPTOY dataset container, and analytic face/text metrics.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{encode_face_masked, FaceEmbedding};
use crate::error::{Error, Result};
use crate::image::{single_image_dims, BBox, ImageTensor, RegionMask};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const NULL_TOKEN: usize = 0;
pub const VOCAB_SIZE: usize = 10;
pub const CAPTION_LEN: usize = 3;
pub const STRIPE_WIDTH: usize = 4;
/// Mask area separating small from large faces.
pub const SIZE_AREA_SPLIT: f64 = 150.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Background {
    Red,
    Green,
    Blue,
    Striped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placement {
    Left,
    Center,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Size {
    Small,
    Large,
}

impl Background {
    pub const ALL: [Background; 4] = [
        Background::Red,
        Background::Green,
        Background::Blue,
        Background::Striped,
    ];

    pub fn token(self) -> usize {
        1 + self as usize
    }

    /// Plain fill color, or the light stripe color for [`Background::Striped`].
    fn color(self) -> [f32; 3] {
        match self {
            Background::Red => [0.8, -0.6, -0.6],
            Background::Green => [-0.6, 0.8, -0.6],
            Background::Blue => [-0.6, -0.6, 0.8],
            Background::Striped => [0.7, 0.7, 0.7],
        }
    }

    fn pixel(self, x: usize) -> [f32; 3] {
        match self {
            Background::Striped if (x / STRIPE_WIDTH) % 2 == 1 => [-0.7, -0.7, -0.7],
            _ => self.color(),
        }
    }

    /// Classifier prototype: mean RGB and stripe response.
    fn prototype(self) -> [f64; 4] {
        match self {
            Background::Striped => [0.0, 0.0, 0.0, 0.7],
            _ => {
                let c = self.color();
                [c[0] as f64, c[1] as f64, c[2] as f64, 0.0]
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Background::Red => "red",
            Background::Green => "green",
            Background::Blue => "blue",
            Background::Striped => "striped",
        }
    }
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::Left, Placement::Center, Placement::Right];

    pub fn token(self) -> usize {
        5 + self as usize
    }

    pub fn center_x(self) -> f64 {
        match self {
            Placement::Left => 10.0,
            Placement::Center => 16.0,
            Placement::Right => 22.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::Left => "left",
            Placement::Center => "center",
            Placement::Right => "right",
        }
    }

    fn from_centroid(x: f64) -> Self {
        if x < 13.0 {
            Placement::Left
        } else if x > 19.0 {
            Placement::Right
        } else {
            Placement::Center
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn token(self) -> usize {
        8 + self as usize
    }

    pub fn radius(self) -> f64 {
        match self {
            Size::Small => 5.0,
            Size::Large => 9.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Caption {
    pub background: Background,
    pub placement: Placement,
    pub size: Size,
}

impl Caption {
    pub fn new(background: Background, placement: Placement, size: Size) -> Self {
        Self {
            background,
            placement,
            size,
        }
    }

    pub fn tokens(&self) -> [usize; CAPTION_LEN] {
        [self.background.token(), self.placement.token(), self.size.token()]
    }

    pub fn from_tokens(t: [usize; CAPTION_LEN]) -> Result<Self> {
        let bad = || Error::Format(format!("invalid caption tokens {t:?}"));
        let bg = t[0].checked_sub(1).filter(|&i| i < 4).ok_or_else(bad)?;
        let pl = t[1].checked_sub(5).filter(|&i| i < 3).ok_or_else(bad)?;
        let sz = t[2].checked_sub(8).filter(|&i| i < 2).ok_or_else(bad)?;
        Ok(Self::new(Background::ALL[bg], Placement::ALL[pl], Size::ALL[sz]))
    }

    pub fn describe(&self) -> String {
        format!("{} {} {}", self.background.name(), self.placement.name(), self.size.name())
    }

    /// Every caption, in token order.
    pub fn all() -> Vec<Caption> {
        let mut out = Vec::new();
        for bg in Background::ALL {
            for pl in Placement::ALL {
                for sz in Size::ALL {
                    out.push(Caption::new(bg, pl, sz));
                }
            }
        }
        out
    }

    /// The 12 evaluation prompts: each background with each placement, the
    /// size alternating so both sizes are covered.
    pub fn evaluation_set() -> Vec<Caption> {
        let mut out = Vec::new();
        for (i, bg) in Background::ALL.into_iter().enumerate() {
            for (j, pl) in Placement::ALL.into_iter().enumerate() {
                let sz = if (i + j) % 2 == 0 { Size::Large } else { Size::Small };
                out.push(Caption::new(bg, pl, sz));
            }
        }
        out
    }
}

impl std::str::FromStr for Caption {
    type Err = Error;

    /// Parses `describe` output such as `blue center large`.
    fn from_str(s: &str) -> Result<Self> {
        let words: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Parameter(format!("cannot parse caption `{s}` (expected e.g. `blue center large`)"));
        if words.len() != CAPTION_LEN {
            return Err(bad());
        }
        let bg = Background::ALL.into_iter().find(|b| b.name() == words[0]).ok_or_else(bad)?;
        let pl = Placement::ALL.into_iter().find(|p| p.name() == words[1]).ok_or_else(bad)?;
        let sz = Size::ALL.into_iter().find(|z| z.name() == words[2]).ok_or_else(bad)?;
        Ok(Caption::new(bg, pl, sz))
    }
}

pub fn null_caption() -> [usize; CAPTION_LEN] {
    [NULL_TOKEN; CAPTION_LEN]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: u32,
    pub face_color: [f32; 3],
    pub eye_color: [f32; 3],
}

impl IdentitySpec {
    /// Deterministic identity `id` of the world seeded by `seed`.
    pub fn generate(seed: u64, id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x1D_0000_0000 + id as u64));
        let mut draw = || [(); 3].map(|_| rng.gen_range(-0.9f32..=0.9));
        let face_color = draw();
        let mut eye_color = draw();
        while linf(&face_color, &eye_color) < 0.5 {
            eye_color = draw();
        }
        Self {
            id,
            face_color,
            eye_color,
        }
    }
}

fn linf(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 3, 32, 32]`
    pub image: ImageTensor,
    pub face_mask: RegionMask,
    pub face_bbox: BBox,
    pub identity: IdentitySpec,
    pub caption: Caption,
}

fn in_disk(y: usize, x: usize, cy: f64, cx: f64, r: f64) -> bool {
    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
    dy * dy + dx * dx <= r * r
}

/// Render with an explicit sub-pixel offset of the face center.
pub fn render_at(identity: &IdentitySpec, caption: Caption, dx: f64, dy: f64) -> Sample {
    let n = IMAGE_SIZE;
    let r = caption.size.radius();
    let (cx, cy) = (caption.placement.center_x() + dx, n as f64 / 2.0 + dy);
    let eye_r = r / 4.0;
    let eyes = [(cx - r / 3.0, cy - r / 4.0), (cx + r / 3.0, cy - r / 4.0)];
    let mut img = vec![0f32; 3 * n * n];
    let mut mask = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut px = caption.background.pixel(x);
            if in_disk(y, x, cy, cx, r) {
                mask[y * n + x] = true;
                px = identity.face_color;
                if eyes.iter().any(|&(ex, ey)| in_disk(y, x, ey, ex, eye_r)) {
                    px = identity.eye_color;
                }
            }
            for c in 0..3 {
                img[c * n * n + y * n + x] = px[c];
            }
        }
    }
    let face_mask = RegionMask::from_bools(n, n, &mask).expect("mask size");
    let face_bbox = face_mask.bbox().expect("face disk is never empty");
    Sample {
        image: Tensor::new([1, 3, n, n], img).expect("image size"),
        face_mask,
        face_bbox,
        identity: *identity,
        caption,
    }
}

/// Render with a seed-determined jitter of at most one pixel per axis.
pub fn render_sample(identity: &IdentitySpec, caption: Caption, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = rng.gen_range(-1.0..=1.0);
    let dy = rng.gen_range(-1.0..=1.0);
    render_at(identity, caption, dx, dy)
}

/// Canonical un-jittered render used as the face-score reference.
pub fn reference_sample(identity: &IdentitySpec) -> Sample {
    render_at(
        identity,
        Caption::new(Background::Blue, Placement::Center, Size::Large),
        0.0,
        0.0,
    )
}

pub fn reference_embedding(identity: &IdentitySpec) -> FaceEmbedding {
    let r = reference_sample(identity);
    encode_face_masked(&r.image, &r.face_mask).expect("reference face")
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity of the masked face encoding against the identity's
/// canonical render. Returns 0 for an empty mask.
pub fn face_score(image: &ImageTensor, m: &RegionMask, reference: &IdentitySpec) -> Result<f64> {
    if m.bbox().is_none() {
        return Ok(0.0);
    }
    let e = encode_face_masked(image, m)?;
    Ok(cosine(&e, &reference_embedding(reference)))
}

/// Attribute estimates read off an image and a face mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptionEstimate {
    pub background: Background,
    pub placement: Option<Placement>,
    pub size: Option<Size>,
}

pub fn classify(image: &ImageTensor, m: &RegionMask) -> Result<CaptionEstimate> {
    let (h, w) = single_image_dims(image)?;
    if (m.height(), m.width()) != (h, w) {
        return Err(Error::Structural("mask and image sizes differ".into()));
    }
    let d = image.data();
    let plane = h * w;
    let mut feat = [0f64; 4];
    let mut count = 0usize;
    let (mut area, mut sx) = (0f64, 0f64);
    for y in 0..h {
        for x in 0..w {
            let mv = m.get(y, x) as f64;
            area += mv;
            sx += mv * (x as f64 + 0.5);
            if mv >= 0.5 {
                continue;
            }
            let px = [0, 1, 2].map(|c| d[c * plane + y * w + x] as f64);
            let sign = if (x / STRIPE_WIDTH).is_multiple_of(2) { 1.0 } else { -1.0 };
            for c in 0..3 {
                feat[c] += px[c];
            }
            feat[3] += sign * (px[0] + px[1] + px[2]) / 3.0;
            count += 1;
        }
    }
    let feat = feat.map(|v| v / count.max(1) as f64);
    let dist = |bg: Background| {
        let p = bg.prototype();
        (0..4).map(|i| (feat[i] - p[i]).powi(2)).sum::<f64>()
    };
    let background = Background::ALL
        .into_iter()
        .min_by(|a, b| dist(*a).total_cmp(&dist(*b)))
        .expect("four prototypes");
    let (placement, size) = if area > 0.0 {
        let size = if area > SIZE_AREA_SPLIT { Size::Large } else { Size::Small };
        (Some(Placement::from_centroid(sx / area)), Some(size))
    } else {
        (None, None)
    };
    Ok(CaptionEstimate {
        background,
        placement,
        size,
    })
}

/// Fraction of the three caption attributes recovered from the image.
pub fn text_match_score(image: &ImageTensor, caption: &Caption, m: &RegionMask) -> Result<f64> {
    let est = classify(image, m)?;
    let hits = (est.background == caption.background) as u8
        + (est.placement == Some(caption.placement)) as u8
        + (est.size == Some(caption.size)) as u8;
    Ok(hits as f64 / 3.0)
}

const MAGIC: &[u8; 6] = b"DPTOY\0";
const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Identities `0..n_identities`, each rendered `per_identity` times with
/// backgrounds cycling per identity so every background is equally common.
pub fn make_dataset(n_identities: usize, per_identity: usize, seed: u64) -> Dataset {
    let mut samples = Vec::with_capacity(n_identities * per_identity);
    for i in 0..n_identities {
        let identity = IdentitySpec::generate(seed, i as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64));
        for k in 0..per_identity {
            let caption = Caption::new(
                Background::ALL[(i + k) % 4],
                Placement::ALL[rng.gen_range(0..3)],
                Size::ALL[rng.gen_range(0..2)],
            );
            samples.push(render_sample(&identity, caption, rng.gen()));
        }
    }
    Dataset { samples }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let n = IMAGE_SIZE;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        for s in &self.samples {
            let dims = single_image_dims(&s.image)?;
            if dims != (n, n) || (s.face_mask.height(), s.face_mask.width()) != (n, n) {
                return Err(Error::Parameter(format!("DPTOY stores {n}x{n} samples only")));
            }
            for v in s.identity.face_color.iter().chain(&s.identity.eye_color) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&s.identity.id.to_le_bytes())?;
            for t in s.caption.tokens() {
                w.write_all(&(t as u16).to_le_bytes())?;
            }
            let b = s.face_bbox;
            for v in [b.x0, b.y0, b.x1, b.y1] {
                w.write_all(&(v as u16).to_le_bytes())?;
            }
            let mut bits = vec![0u8; (n * n).div_ceil(8)];
            for (i, &v) in s.face_mask.data().iter().enumerate() {
                if v >= 0.5 {
                    bits[i / 8] |= 0x80 >> (i % 8);
                }
            }
            w.write_all(&bits)?;
            let plane = n * n;
            let d = s.image.data();
            for p in 0..plane {
                for c in 0..3 {
                    w.write_all(&d[c * plane + p].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let n = IMAGE_SIZE;
        let mut magic = [0u8; 6];
        read_into(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a DPTOY file".into()));
        }
        let version = u16::from_le_bytes(read_arr(&mut r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported DPTOY version {version}")));
        }
        let count = u32::from_le_bytes(read_arr(&mut r)?) as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut f = [0f32; 6];
            for v in &mut f {
                *v = f32::from_le_bytes(read_arr(&mut r)?);
            }
            let id = u32::from_le_bytes(read_arr(&mut r)?);
            let mut tokens = [0usize; 3];
            for t in &mut tokens {
                *t = u16::from_le_bytes(read_arr(&mut r)?) as usize;
            }
            let mut bb = [0usize; 4];
            for v in &mut bb {
                *v = u16::from_le_bytes(read_arr(&mut r)?) as usize;
            }
            let mut bits = vec![0u8; (n * n).div_ceil(8)];
            read_into(&mut r, &mut bits)?;
            let mask: Vec<bool> = (0..n * n).map(|i| bits[i / 8] & (0x80 >> (i % 8)) != 0).collect();
            let plane = n * n;
            let mut img = vec![0f32; 3 * plane];
            for p in 0..plane {
                for c in 0..3 {
                    img[c * plane + p] = f32::from_le_bytes(read_arr(&mut r)?);
                }
            }
            samples.push(Sample {
                image: Tensor::new([1, 3, n, n], img)?,
                face_mask: RegionMask::from_bools(n, n, &mask)?,
                face_bbox: BBox::new(bb[0], bb[1], bb[2], bb[3]),
                identity: IdentitySpec {
                    id,
                    face_color: [f[0], f[1], f[2]],
                    eye_color: [f[3], f[4], f[5]],
                },
                caption: Caption::from_tokens(tokens)?,
            });
        }
        Ok(Self { samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::image::write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes[..])
    }

    /// One entry per distinct identity, in first-appearance order.
    pub fn identities(&self) -> Vec<IdentitySpec> {
        let mut seen = std::collections::BTreeSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.identity.id))
            .map(|s| s.identity)
            .collect()
    }
}

fn read_into<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated DPTOY file".into()),
        _ => Error::Io(e),
    })
}

fn read_arr<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_into(r, &mut b)?;
    Ok(b)
}
