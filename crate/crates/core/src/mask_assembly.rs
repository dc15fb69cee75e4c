//! Joint region-text attention mask.
//!
//! The joint sequence is the regional caption tokens (spans concatenated in
//! slot order) followed by the flattened image tokens. The mask has four
//! blocks:
//!
//! ```text
//!            text   image
//!   text   [ t2t    t2i ]
//!   image  [ i2t    i2i ]
//! ```
//!
//! * `i2t` is the union over regions of `R_h^t ⊗ R_c^t`: an image cell sees
//!   the caption tokens of every region that contains it.
//! * `t2i` is the transpose of `i2t`.
//! * `i2i` is the union of `R_h^t ⊗ R_h^t` over regions plus the background
//!   outer product, so background cells only see each other.
//! * `t2t` is block diagonal, one block per caption span.
//!
//! Overlapping regions make the arithmetic sums exceed one; every block is
//! kept binary (logical union).

use serde::Serialize;
use thiserror::Error;

use crate::bitmat::BitMatrix;
use crate::box_prep::PreparedRegions;
use crate::region_raster::RegionGridMasks;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("{regions} region masks but {spans} text spans")]
    CountMismatch { regions: usize, spans: usize },
    #[error("span {index} has zero length")]
    EmptySpan { index: usize },
    #[error("{block} is {actual_rows}x{actual_cols}, expected {rows}x{cols}")]
    DimensionMismatch { block: &'static str, rows: usize, cols: usize, actual_rows: usize, actual_cols: usize },
    #[error("t2i ({t2i_rows}x{t2i_cols}) is not the transpose of i2t ({i2t_rows}x{i2t_cols})")]
    TransposeViolation { t2i_rows: usize, t2i_cols: usize, i2t_rows: usize, i2t_cols: usize },
    #[error("{block} violates {what}")]
    Invariant { block: &'static str, what: &'static str },
    #[error("malformed RATTN dump: {0}")]
    BadDump(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Span {
    pub offset: usize,
    pub length: usize,
}

impl Span {
    pub fn contains(&self, token: usize) -> bool {
        (self.offset..self.offset + self.length).contains(&token)
    }
}

/// Contiguous caption spans over the regional text sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TextLayout {
    spans: Vec<Span>,
    total_tokens: usize,
}

impl TextLayout {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self, MaskError> {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut offset = 0;
        for (index, &length) in lengths.iter().enumerate() {
            if length == 0 {
                return Err(MaskError::EmptySpan { index });
            }
            spans.push(Span { offset, length });
            offset += length;
        }
        Ok(Self { spans, total_tokens: offset })
    }

    /// Spans for the regions that survived rasterization at one level, in
    /// slot order.
    pub fn for_level(prepared: &PreparedRegions, masks: &RegionGridMasks) -> Result<Self, MaskError> {
        let lengths: Vec<usize> = masks.slot_ids.iter().map(|&s| prepared.slots[s].token_count).collect();
        Self::from_lengths(&lengths)
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    /// Span index owning `token`.
    pub fn span_of(&self, token: usize) -> Option<usize> {
        self.spans.iter().position(|s| s.contains(token))
    }
}

fn check_counts(masks: &RegionGridMasks, layout: &TextLayout) -> Result<(), MaskError> {
    if masks.region_count() != layout.spans.len() {
        return Err(MaskError::CountMismatch { regions: masks.region_count(), spans: layout.spans.len() });
    }
    Ok(())
}

fn cells(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
}

/// Image-to-text block, `I x T`.
pub fn build_i2t(masks: &RegionGridMasks, layout: &TextLayout) -> Result<BitMatrix, MaskError> {
    check_counts(masks, layout)?;
    let mut m = BitMatrix::zeros(masks.grid.cells(), layout.total_tokens);
    for (region, span) in masks.region_masks.iter().zip(&layout.spans) {
        for i in cells(region) {
            for j in span.offset..span.offset + span.length {
                m.set(i, j, true);
            }
        }
    }
    Ok(m)
}

pub fn build_t2i(i2t: &BitMatrix) -> BitMatrix {
    i2t.transpose()
}

/// Image-to-image block, `I x I`.
pub fn build_i2i(masks: &RegionGridMasks) -> BitMatrix {
    let n = masks.grid.cells();
    let mut m = BitMatrix::zeros(n, n);
    for region in masks.region_masks.iter().chain(std::iter::once(&masks.background)) {
        let idx = cells(region);
        for &i in &idx {
            for &j in &idx {
                m.set(i, j, true);
            }
        }
    }
    m
}

/// Text-to-text block, `T x T`, block diagonal over spans.
pub fn build_t2t(layout: &TextLayout) -> BitMatrix {
    let t = layout.total_tokens;
    let mut m = BitMatrix::zeros(t, t);
    for s in &layout.spans {
        for i in s.offset..s.offset + s.length {
            for j in s.offset..s.offset + s.length {
                m.set(i, j, true);
            }
        }
    }
    m
}

#[derive(Clone, PartialEq, Eq)]
pub struct RegionalMask {
    pub t2t: BitMatrix,
    pub t2i: BitMatrix,
    pub i2t: BitMatrix,
    pub i2i: BitMatrix,
    pub joint: BitMatrix,
}

impl std::fmt::Debug for RegionalMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RegionalMask {{ T: {}, I: {} }}", self.text_tokens(), self.image_tokens())
    }
}

fn expect_shape(block: &'static str, m: &BitMatrix, rows: usize, cols: usize) -> Result<(), MaskError> {
    if m.shape() != (rows, cols) {
        return Err(MaskError::DimensionMismatch {
            block,
            rows,
            cols,
            actual_rows: m.rows(),
            actual_cols: m.cols(),
        });
    }
    Ok(())
}

/// Compose the joint mask, text tokens first.
pub fn assemble(t2t: BitMatrix, t2i: BitMatrix, i2t: BitMatrix, i2i: BitMatrix) -> Result<RegionalMask, MaskError> {
    let t = t2t.rows();
    let i = i2i.rows();
    expect_shape("t2t", &t2t, t, t)?;
    expect_shape("i2i", &i2i, i, i)?;
    expect_shape("i2t", &i2t, i, t)?;
    if t2i.shape() != (t, i) || t2i != i2t.transpose() {
        return Err(MaskError::TransposeViolation {
            t2i_rows: t2i.rows(),
            t2i_cols: t2i.cols(),
            i2t_rows: i2t.rows(),
            i2t_cols: i2t.cols(),
        });
    }
    for (block, m) in [("t2t", &t2t), ("i2i", &i2i)] {
        if !m.is_symmetric() {
            return Err(MaskError::Invariant { block, what: "symmetry" });
        }
        if !m.diagonal_all_set() {
            return Err(MaskError::Invariant { block, what: "all-ones diagonal" });
        }
    }
    let joint = BitMatrix::from_fn(t + i, t + i, |r, c| match (r < t, c < t) {
        (true, true) => t2t.get(r, c),
        (true, false) => t2i.get(r, c - t),
        (false, true) => i2t.get(r - t, c),
        (false, false) => i2i.get(r - t, c - t),
    });
    Ok(RegionalMask { t2t, t2i, i2t, i2i, joint })
}

/// All four blocks from one level's masks and layout.
pub fn build_regional_mask(masks: &RegionGridMasks, layout: &TextLayout) -> Result<RegionalMask, MaskError> {
    let i2t = build_i2t(masks, layout)?;
    let t2i = build_t2i(&i2t);
    assemble(build_t2t(layout), t2i, i2t, build_i2i(masks))
}

impl RegionalMask {
    pub fn text_tokens(&self) -> usize {
        self.t2t.rows()
    }

    pub fn image_tokens(&self) -> usize {
        self.i2i.rows()
    }

    /// Joint mask with `global` unrestricted tokens prepended: they attend to
    /// everything and every token attends to them.
    pub fn joint_with_global(&self, global: usize) -> BitMatrix {
        let n = self.joint.rows();
        BitMatrix::from_fn(global + n, global + n, |r, c| {
            r < global || c < global || self.joint.get(r - global, c - global)
        })
    }

    /// `RATTN v1` text dump of the joint mask.
    pub fn to_rattn(&self) -> String {
        let n = self.joint.rows();
        let mut s = String::with_capacity(32 + n * (n + 1));
        s.push_str(&format!("RATTN v1 {} {}\n", self.text_tokens(), self.image_tokens()));
        for row in self.joint.ascii_rows() {
            s.push_str(&row);
            s.push('\n');
        }
        s
    }

    /// Parse a `RATTN v1` dump back into blocks, re-checking every invariant.
    pub fn from_rattn(text: &str) -> Result<Self, MaskError> {
        let bad = |m: &str| MaskError::BadDump(m.to_owned());
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split(' ').collect();
        if header.len() != 4 || header[0] != "RATTN" || header[1] != "v1" {
            return Err(bad("header"));
        }
        let t: usize = header[2].parse().map_err(|_| bad("T"))?;
        let i: usize = header[3].parse().map_err(|_| bad("I"))?;
        let n = t + i;
        let mut rows = Vec::with_capacity(n);
        for line in lines {
            if line.len() != n || !line.bytes().all(|b| b == b'0' || b == b'1') {
                return Err(bad("row"));
            }
            rows.push(line.bytes().map(|b| b - b'0').collect::<Vec<u8>>());
        }
        if rows.len() != n {
            return Err(bad("row count"));
        }
        let joint = if n == 0 { BitMatrix::zeros(0, 0) } else { BitMatrix::from_rows(&rows) };
        let block = |r0: usize, c0: usize, h: usize, w: usize| BitMatrix::from_fn(h, w, |r, c| joint.get(r0 + r, c0 + c));
        assemble(block(0, 0, t, t), block(0, t, t, i), block(t, 0, i, t), block(t, t, i, i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region_raster::GridSpec;

    fn masks(side_h: usize, side_w: usize, regions: &[&[usize]]) -> RegionGridMasks {
        let grid = GridSpec { height: side_h, width: side_w, level_id: 0 };
        let region_masks = regions
            .iter()
            .map(|cells| (0..grid.cells()).map(|i| cells.contains(&i)).collect())
            .collect();
        RegionGridMasks::from_masks(grid, region_masks).unwrap()
    }

    #[test]
    fn i2t_single_cell() {
        let m = masks(2, 2, &[&[0]]);
        let layout = TextLayout::from_lengths(&[2]).unwrap();
        let i2t = build_i2t(&m, &layout).unwrap();
        assert_eq!(i2t, BitMatrix::from_rows(&[[1u8, 1], [0, 0], [0, 0], [0, 0]]));
        let t2i = build_t2i(&i2t);
        assert_eq!(t2i, BitMatrix::from_rows(&[[1u8, 0, 0, 0], [1, 0, 0, 0]]));
        assert_eq!(build_t2i(&t2i), i2t);
    }

    #[test]
    fn i2t_zero_regions() {
        let m = masks(2, 2, &[]);
        let i2t = build_i2t(&m, &TextLayout::default()).unwrap();
        assert_eq!(i2t.shape(), (4, 0));
        assert_eq!(build_t2i(&i2t).shape(), (0, 4));
    }

    #[test]
    fn i2t_shared_cell() {
        let m = masks(2, 2, &[&[0, 1], &[1, 3]]);
        let layout = TextLayout::from_lengths(&[1, 2]).unwrap();
        let i2t = build_i2t(&m, &layout).unwrap();
        assert_eq!(i2t, BitMatrix::from_rows(&[[1u8, 0, 0], [1, 1, 1], [0, 0, 0], [0, 1, 1]]));
    }

    #[test]
    fn i2t_count_mismatch() {
        let m = masks(2, 2, &[&[0]]);
        let err = build_i2t(&m, &TextLayout::from_lengths(&[1, 1]).unwrap()).unwrap_err();
        assert_eq!(err, MaskError::CountMismatch { regions: 1, spans: 2 });
    }

    #[test]
    fn i2i_cases() {
        let m = masks(2, 2, &[&[0]]);
        assert_eq!(
            build_i2i(&m),
            BitMatrix::from_rows(&[[1u8, 0, 0, 0], [0, 1, 1, 1], [0, 1, 1, 1], [0, 1, 1, 1]])
        );
        assert_eq!(build_i2i(&masks(2, 2, &[])), BitMatrix::ones(4, 4));
        let ov = build_i2i(&masks(1, 4, &[&[0, 1], &[1, 2]]));
        assert_eq!(ov.row(1), &[true, true, true, false]);
        assert_eq!(ov.row(3), &[false, false, false, true]);
    }

    #[test]
    fn t2t_cases() {
        let l = TextLayout::from_lengths(&[2, 1]).unwrap();
        assert_eq!(build_t2t(&l), BitMatrix::from_rows(&[[1u8, 1, 0], [1, 1, 0], [0, 0, 1]]));
        assert_eq!(build_t2t(&TextLayout::from_lengths(&[4]).unwrap()), BitMatrix::ones(4, 4));
        assert_eq!(build_t2t(&TextLayout::default()).shape(), (0, 0));
        assert_eq!(TextLayout::from_lengths(&[1, 0]).unwrap_err(), MaskError::EmptySpan { index: 1 });
    }

    #[test]
    fn assemble_example() {
        let m = masks(2, 2, &[&[0]]);
        let layout = TextLayout::from_lengths(&[2]).unwrap();
        let rm = build_regional_mask(&m, &layout).unwrap();
        let expect = BitMatrix::from_rows(&[
            [1u8, 1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0, 0],
            [0, 0, 0, 1, 1, 1],
            [0, 0, 0, 1, 1, 1],
            [0, 0, 0, 1, 1, 1],
        ]);
        assert_eq!(rm.joint, expect);
        assert!(rm.joint.diagonal_all_set());
    }

    #[test]
    fn assemble_zero_regions() {
        let m = masks(3, 3, &[]);
        let rm = build_regional_mask(&m, &TextLayout::default()).unwrap();
        assert_eq!(rm.joint, BitMatrix::ones(9, 9));
        assert_eq!(rm.joint, rm.i2i);
    }

    #[test]
    fn assemble_rejects_bad_t2i() {
        let m = masks(2, 2, &[&[0]]);
        let layout = TextLayout::from_lengths(&[2]).unwrap();
        let i2t = build_i2t(&m, &layout).unwrap();
        let err = assemble(build_t2t(&layout), BitMatrix::zeros(2, 3), i2t.clone(), build_i2i(&m)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
        let mut wrong = build_t2i(&i2t);
        wrong.set(1, 3, true);
        assert!(matches!(
            assemble(build_t2t(&layout), wrong, i2t.clone(), build_i2i(&m)),
            Err(MaskError::TransposeViolation { .. })
        ));
        let err = assemble(build_t2t(&layout), build_t2i(&i2t), i2t, BitMatrix::ones(3, 3)).unwrap_err();
        assert!(matches!(err, MaskError::DimensionMismatch { block: "i2t", .. }), "{err}");
    }

    #[test]
    fn global_tokens_prepended() {
        let m = masks(2, 2, &[&[0]]);
        let rm = build_regional_mask(&m, &TextLayout::from_lengths(&[1]).unwrap()).unwrap();
        let g = rm.joint_with_global(2);
        assert_eq!(g.shape(), (7, 7));
        assert!(g.row(0).iter().all(|&b| b));
        assert!((0..7).all(|r| g.get(r, 1)));
        assert_eq!(g.get(2, 4), rm.joint.get(0, 2));
        assert_eq!(rm.joint_with_global(0), rm.joint);
    }

    #[test]
    fn rattn_round_trip() {
        let m = masks(2, 3, &[&[0, 1], &[4]]);
        let rm = build_regional_mask(&m, &TextLayout::from_lengths(&[2, 1]).unwrap()).unwrap();
        let text = rm.to_rattn();
        assert!(text.starts_with("RATTN v1 3 6\n"));
        assert_eq!(text.lines().count(), 10);
        assert_eq!(RegionalMask::from_rattn(&text).unwrap(), rm);
        assert!(RegionalMask::from_rattn("RATTN v1 1 1\n11\n1\n").is_err());
    }
}
