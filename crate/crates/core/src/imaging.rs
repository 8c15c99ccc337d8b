//! Raster types and the mask algebra used by the disentanglement step.
//!
//! RGB rasters are row-major, channel-interleaved (`H×W×3`) reals in `[0,1]`.
//! Instance-ID rasters use `0` for background (table or void).

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type InstanceId = u32;

/// Reserved background ID.
pub const BACKGROUND: InstanceId = 0;

pub const WHITE: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImagingError {
    #[error("background id 0 cannot be part of a mask group")]
    BackgroundInGroup,
    #[error("raster shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("buffer of length {len} does not describe a {h}x{w}x{c} raster")]
    BadBuffer { len: usize, h: usize, w: usize, c: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Base,
    Wrist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbRaster {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl RgbRaster {
    pub fn filled(h: usize, w: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&color);
        }
        RgbRaster { h, w, data }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self, ImagingError> {
        if data.len() != h * w * 3 {
            return Err(ImagingError::BadBuffer {
                len: data.len(),
                h,
                w,
                c: 3,
            });
        }
        Ok(RgbRaster { h, w, data })
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.w + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, r: usize, c: usize, color: [f32; 3]) {
        let i = (r * self.w + c) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Channel-major (`3×H×W`) copy.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.h * self.w;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for ch in 0..3 {
                out[ch * n + p] = self.data[p * 3 + ch];
            }
        }
        out
    }

    pub fn from_chw(h: usize, w: usize, chw: &[f32]) -> Result<Self, ImagingError> {
        let n = h * w;
        if chw.len() != 3 * n {
            return Err(ImagingError::BadBuffer {
                len: chw.len(),
                h,
                w,
                c: 3,
            });
        }
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for ch in 0..3 {
                data[p * 3 + ch] = chw[ch * n + p];
            }
        }
        Ok(RgbRaster { h, w, data })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdRaster {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<InstanceId>,
}

impl IdRaster {
    pub fn background(h: usize, w: usize) -> Self {
        IdRaster {
            h,
            w,
            ids: vec![BACKGROUND; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, ids: Vec<InstanceId>) -> Result<Self, ImagingError> {
        if ids.len() != h * w {
            return Err(ImagingError::BadBuffer {
                len: ids.len(),
                h,
                w,
                c: 1,
            });
        }
        Ok(IdRaster { h, w, ids })
    }

    pub fn get(&self, r: usize, c: usize) -> InstanceId {
        self.ids[r * self.w + c]
    }

    /// Distinct nonzero IDs present in the raster.
    pub fn present(&self) -> BTreeSet<InstanceId> {
        self.ids.iter().copied().filter(|&i| i != BACKGROUND).collect()
    }
}

/// One camera view: paired color and instance-ID rasters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub rgb: RgbRaster,
    pub ids: IdRaster,
    pub view: View,
}

impl Frame {
    pub fn new(rgb: RgbRaster, ids: IdRaster, view: View) -> Result<Self, ImagingError> {
        if rgb.h != ids.h || rgb.w != ids.w {
            return Err(ImagingError::ShapeMismatch(rgb.h, rgb.w, ids.h, ids.w));
        }
        Ok(Frame { rgb, ids, view })
    }

    pub fn height(&self) -> usize {
        self.rgb.h
    }

    pub fn width(&self) -> usize {
        self.rgb.w
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<u8>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, ImagingError> {
        if self.h != other.h || self.w != other.w {
            return Err(ImagingError::ShapeMismatch(self.h, self.w, other.h, other.w));
        }
        Ok(BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
        })
    }
}

/// 4×H×W image: white-masked RGB in channels 0..2, the mask in channel 3.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedStack {
    pub h: usize,
    pub w: usize,
    pub channels: Vec<f32>,
}

impl MaskedStack {
    pub const CHANNELS: usize = 4;

    /// All-white, zero-mask stack (an empty group or a padding slot).
    pub fn empty(h: usize, w: usize) -> Self {
        let n = h * w;
        let mut channels = vec![1.0; 4 * n];
        channels[3 * n..].fill(0.0);
        MaskedStack { h, w, channels }
    }

    pub fn plane(&self, ch: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.channels[ch * n..(ch + 1) * n]
    }

    pub fn mask(&self) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.plane(3).iter().map(|&v| u8::from(v == 1.0)).collect(),
        }
    }

    /// Masked RGB as an interleaved raster.
    pub fn rgb(&self) -> RgbRaster {
        RgbRaster::from_chw(self.h, self.w, &self.channels[..3 * self.h * self.w])
            .expect("stack has 3 color planes")
    }
}

/// A named, ordered list of object colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub name: String,
    pub colors: Vec<[f32; 3]>,
}

impl Palette {
    pub fn training() -> Self {
        Palette {
            name: "training".into(),
            colors: vec![
                [0.90, 0.10, 0.10],
                [0.10, 0.70, 0.20],
                [0.10, 0.25, 0.90],
                [0.95, 0.85, 0.10],
                [0.80, 0.10, 0.70],
                [0.95, 0.50, 0.10],
                [0.10, 0.75, 0.80],
                [0.50, 0.20, 0.75],
                [0.55, 0.30, 0.10],
            ],
        }
    }

    pub fn held_out() -> Self {
        Palette {
            name: "held_out".into(),
            colors: vec![
                [1.00, 0.60, 0.75],
                [0.45, 0.45, 0.00],
                [0.00, 0.40, 0.40],
                [0.05, 0.05, 0.40],
                [0.60, 1.00, 0.25],
                [0.40, 0.00, 0.10],
                [0.10, 0.10, 0.10],
                [0.55, 0.80, 1.00],
                [1.00, 1.00, 1.00],
            ],
        }
    }

    pub fn color(&self, i: usize) -> [f32; 3] {
        self.colors[i % self.colors.len()]
    }

    pub fn is_disjoint(&self, other: &Palette) -> bool {
        self.colors.iter().all(|c| !other.colors.contains(c))
    }
}

/// `bits[p] = 1` iff `ids[p] ∈ group`.
pub fn binary_mask(
    ids: &IdRaster,
    group: &BTreeSet<InstanceId>,
) -> Result<BinaryMask, ImagingError> {
    if group.contains(&BACKGROUND) {
        return Err(ImagingError::BackgroundInGroup);
    }
    Ok(BinaryMask {
        h: ids.h,
        w: ids.w,
        bits: ids.ids.iter().map(|i| u8::from(group.contains(i))).collect(),
    })
}

/// Keeps `rgb` where the mask is set, paints white elsewhere, and appends the
/// mask as a fourth channel.
pub fn apply_mask(rgb: &RgbRaster, mask: &BinaryMask) -> Result<MaskedStack, ImagingError> {
    if rgb.h != mask.h || rgb.w != mask.w {
        return Err(ImagingError::ShapeMismatch(rgb.h, rgb.w, mask.h, mask.w));
    }
    let n = rgb.h * rgb.w;
    let mut channels = vec![0.0f32; 4 * n];
    for p in 0..n {
        let on = mask.bits[p] == 1;
        for ch in 0..3 {
            channels[ch * n + p] = if on { rgb.data[p * 3 + ch] } else { WHITE[ch] };
        }
        channels[3 * n + p] = f32::from(u8::from(on));
    }
    Ok(MaskedStack {
        h: rgb.h,
        w: rgb.w,
        channels,
    })
}

/// Foreground indicator (`ids ≠ 0`).
pub fn foreground(ids: &IdRaster) -> BinaryMask {
    BinaryMask {
        h: ids.h,
        w: ids.w,
        bits: ids.ids.iter().map(|&i| u8::from(i != BACKGROUND)).collect(),
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, img: &RgbRaster) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.w, img.h)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    f.write_all(&bytes)?;
    f.flush()
}

/// Places rasters of equal height side by side with a 2-pixel dark separator.
pub fn side_by_side(images: &[RgbRaster]) -> RgbRaster {
    const GAP: usize = 2;
    let h = images.iter().map(|i| i.h).max().unwrap_or(0);
    let w = images.iter().map(|i| i.w).sum::<usize>() + GAP * images.len().saturating_sub(1);
    let mut out = RgbRaster::filled(h, w, [0.2, 0.2, 0.2]);
    let mut x0 = 0;
    for img in images {
        for r in 0..img.h {
            for c in 0..img.w {
                out.set(r, x0 + c, img.pixel(r, c));
            }
        }
        x0 += img.w + GAP;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(h: usize, w: usize, v: &[u32]) -> IdRaster {
        IdRaster::from_vec(h, w, v.to_vec()).unwrap()
    }

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn mask_by_definition() {
        let r = ids(2, 2, &[0, 5, 5, 7]);
        assert_eq!(binary_mask(&r, &set(&[5])).unwrap().bits, vec![0, 1, 1, 0]);
        assert_eq!(binary_mask(&r, &set(&[])).unwrap().bits, vec![0, 0, 0, 0]);
        let r = ids(2, 3, &[0, 3, 9, 9, 0, 3]);
        assert_eq!(binary_mask(&r, &set(&[3, 9])).unwrap(), foreground(&r));
    }

    #[test]
    fn background_group_rejected() {
        let r = ids(1, 2, &[0, 1]);
        assert_eq!(
            binary_mask(&r, &set(&[0, 1])),
            Err(ImagingError::BackgroundInGroup)
        );
    }

    #[test]
    fn full_and_empty_masks() {
        let rgb = RgbRaster::from_vec(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let all = BinaryMask { h: 1, w: 2, bits: vec![1, 1] };
        let s = apply_mask(&rgb, &all).unwrap();
        assert_eq!(s.rgb(), rgb);
        assert_eq!(s.plane(3), &[1.0, 1.0]);
        let none = BinaryMask { h: 1, w: 2, bits: vec![0, 0] };
        let s = apply_mask(&rgb, &none).unwrap();
        assert_eq!(s, MaskedStack::empty(1, 2));
    }

    #[test]
    fn white_object_distinguished_by_mask_channel() {
        let rgb = RgbRaster::from_vec(1, 2, vec![1.0; 6]).unwrap();
        let m = BinaryMask { h: 1, w: 2, bits: vec![1, 0] };
        let s = apply_mask(&rgb, &m).unwrap();
        assert_eq!(s.rgb().pixel(0, 0), WHITE);
        assert_eq!(s.rgb().pixel(0, 1), WHITE);
        assert_eq!(s.plane(3), &[1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let rgb = RgbRaster::filled(2, 2, [0.5; 3]);
        let m = BinaryMask { h: 1, w: 4, bits: vec![0; 4] };
        assert!(apply_mask(&rgb, &m).is_err());
        assert!(Frame::new(rgb, IdRaster::background(2, 3), View::Base).is_err());
    }

    #[test]
    fn palettes_are_disjoint() {
        assert!(Palette::training().is_disjoint(&Palette::held_out()));
    }

    #[test]
    fn ppm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        write_ppm(&p, &RgbRaster::filled(3, 5, [1.0, 0.0, 0.5])).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 45);
        assert_eq!(&bytes[11..14], &[255, 0, 128]);
    }

    fn raster_strategy() -> impl Strategy<Value = (IdRaster, RgbRaster)> {
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0u32..6, h * w),
                proptest::collection::vec(0.0f32..=1.0, h * w * 3),
            )
                .prop_map(move |(i, c)| {
                    (ids(h, w, &i), RgbRaster::from_vec(h, w, c).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn stack_invariants_and_idempotence((idr, rgb) in raster_strategy(), group in proptest::collection::btree_set(1u32..6, 0..5)) {
            let m = binary_mask(&idr, &group).unwrap();
            let s = apply_mask(&rgb, &m).unwrap();
            let n = rgb.h * rgb.w;
            for p in 0..n {
                let on = s.plane(3)[p];
                prop_assert!(on == 0.0 || on == 1.0);
                for ch in 0..3 {
                    let v = s.channels[ch * n + p];
                    if on == 1.0 { prop_assert_eq!(v, rgb.data[p * 3 + ch]); } else { prop_assert_eq!(v, 1.0); }
                }
            }
            prop_assert_eq!(s.mask(), m.clone());
            let again = apply_mask(&s.rgb(), &m).unwrap();
            prop_assert_eq!(again, s);
        }
    }
}
