//! Multi-view decomposition: one distant view plus a row-major grid of
//! non-overlapping close-up patches, and the exact `assemble`/`split` pair
//! that maps between patch lists and image layout.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row-major grid of equally sized, non-overlapping patches.
///
/// `assemble` and `split` only use `rows` and `cols`; patch extents are taken
/// from the data, so one grid serves every pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    /// Grid for an `height × width` image cut into `rows × cols` patches.
    pub fn for_image(height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::geometry("grid", "rows and cols must be positive"));
        }
        if !height.is_multiple_of(rows) {
            return Err(Error::geometry(
                "height",
                format!("{height} is not divisible by {rows} grid rows"),
            ));
        }
        if !width.is_multiple_of(cols) {
            return Err(Error::geometry(
                "width",
                format!("{width} is not divisible by {cols} grid cols"),
            ));
        }
        Ok(PatchGrid {
            rows,
            cols,
            patch_h: height / rows,
            patch_w: width / cols,
        })
    }

    /// Number of patches `M`.
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.rows * self.patch_h, self.cols * self.patch_w)
    }

    /// Grid position `(row, col)` of patch `m`.
    pub fn position(&self, m: usize) -> (usize, usize) {
        (m / self.cols, m % self.cols)
    }
}

/// One distant view and `M` close-up views of the same image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBundle {
    pub global_view: Tensor,
    pub local_views: Vec<Tensor>,
    pub grid: PatchGrid,
}

impl ViewBundle {
    /// Views stacked along the batch axis as `[global, local_1 .. local_M]`.
    pub fn stacked(&self) -> Tensor {
        let mut parts: Vec<&Tensor> = vec![&self.global_view];
        parts.extend(self.local_views.iter());
        Tensor::concat(&parts, 0)
    }
}

/// Splits an image into its distant view (bilinear resize to patch size) and
/// its close-up crops.
pub fn decompose(image: &Tensor, grid: &PatchGrid) -> Result<ViewBundle> {
    if image.rank() != 4 {
        return Err(Error::Shape(format!("image must be rank 4, got {:?}", image.shape())));
    }
    let (_, _, h, w) = image.dims4();
    let g = PatchGrid::for_image(h, w, grid.rows, grid.cols)?;
    let local_views = split(image, &g)?;
    let global_view = kernels::resize_bilinear(image, g.patch_h, g.patch_w);
    Ok(ViewBundle {
        global_view,
        local_views,
        grid: g,
    })
}

fn check_divisible(h: usize, w: usize, grid: &PatchGrid) -> Result<()> {
    if !h.is_multiple_of(grid.rows) {
        return Err(Error::geometry(
            "height",
            format!("{h} is not divisible by {} grid rows", grid.rows),
        ));
    }
    if !w.is_multiple_of(grid.cols) {
        return Err(Error::geometry(
            "width",
            format!("{w} is not divisible by {} grid cols", grid.cols),
        ));
    }
    Ok(())
}

/// Places patches at their row-major grid positions.
pub fn assemble(patches: &[Tensor], grid: &PatchGrid) -> Result<Tensor> {
    if patches.len() != grid.count() {
        return Err(Error::geometry(
            "grid",
            format!("expected {} patches, got {}", grid.count(), patches.len()),
        ));
    }
    let shape = patches[0].shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("patches must be rank 4, got {shape:?}")));
    }
    if let Some(bad) = patches.iter().position(|p| p.shape() != shape.as_slice()) {
        return Err(Error::geometry(
            "patch",
            format!(
                "patch {bad} has shape {:?}, patch 0 has {shape:?}",
                patches[bad].shape()
            ),
        ));
    }
    let (b, c, ph, pw) = (shape[0], shape[1], shape[2], shape[3]);
    let (h, w) = (ph * grid.rows, pw * grid.cols);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for (m, p) in patches.iter().enumerate() {
        let (gr, gc) = grid.position(m);
        for plane in 0..b * c {
            for r in 0..ph {
                let s = (plane * ph + r) * pw;
                let d = (plane * h + gr * ph + r) * w + gc * pw;
                out.data_mut()[d..d + pw].copy_from_slice(&p.data()[s..s + pw]);
            }
        }
    }
    Ok(out)
}

/// Cuts a map into `rows × cols` patches in row-major order; inverse of
/// [`assemble`].
pub fn split(map: &Tensor, grid: &PatchGrid) -> Result<Vec<Tensor>> {
    if map.rank() != 4 {
        return Err(Error::Shape(format!("map must be rank 4, got {:?}", map.shape())));
    }
    let (b, c, h, w) = map.dims4();
    check_divisible(h, w, grid)?;
    let (ph, pw) = (h / grid.rows, w / grid.cols);
    Ok((0..grid.count())
        .map(|m| {
            let (gr, gc) = grid.position(m);
            let mut p = Tensor::zeros(&[b, c, ph, pw]);
            for plane in 0..b * c {
                for r in 0..ph {
                    let s = (plane * h + gr * ph + r) * w + gc * pw;
                    let d = (plane * ph + r) * pw;
                    p.data_mut()[d..d + pw].copy_from_slice(&map.data()[s..s + pw]);
                }
            }
            p
        })
        .collect())
}

/// Differentiable [`assemble`].
pub fn assemble_var(tape: &mut Tape, patches: &[Var], grid: &PatchGrid) -> Result<Var> {
    if patches.len() != grid.count() {
        return Err(Error::geometry(
            "grid",
            format!("expected {} patches, got {}", grid.count(), patches.len()),
        ));
    }
    let shape = tape.shape(patches[0]).to_vec();
    if let Some(bad) = patches.iter().position(|&p| tape.shape(p) != shape.as_slice()) {
        return Err(Error::geometry(
            "patch",
            format!("patch {bad} has shape {:?}, patch 0 has {shape:?}", tape.shape(patches[bad])),
        ));
    }
    Ok(tape.tile(patches, grid.rows, grid.cols))
}

/// Differentiable [`split`].
pub fn split_var(tape: &mut Tape, map: Var, grid: &PatchGrid) -> Result<Vec<Var>> {
    let (_, _, h, w) = tape.value(map).dims4();
    check_divisible(h, w, grid)?;
    let (ph, pw) = (h / grid.rows, w / grid.cols);
    Ok((0..grid.count())
        .map(|m| {
            let (gr, gc) = grid.position(m);
            tape.crop(map, gr * ph, gc * pw, ph, pw)
        })
        .collect())
}

/// [`split_var`] for maps whose extents the grid may not divide: such maps
/// are first bilinearly resized up to the next multiple of the grid.
pub fn split_var_resized(tape: &mut Tape, map: Var, grid: &PatchGrid) -> Vec<Var> {
    let (_, _, h, w) = tape.value(map).dims4();
    let th = h.div_ceil(grid.rows) * grid.rows;
    let tw = w.div_ceil(grid.cols) * grid.cols;
    let resized = tape.resize(map, th, tw);
    split_var(tape, resized, grid).expect("resized map is divisible by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize) -> PatchGrid {
        PatchGrid {
            rows,
            cols,
            patch_h: 1,
            patch_w: 1,
        }
    }

    #[test]
    fn split_minimal_grid_is_row_major() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = split(&x, &grid(2, 2)).unwrap();
        let vals: Vec<f64> = p.iter().map(|t| t.data()[0]).collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn assemble_minimal_grid() {
        let p: Vec<Tensor> = (1..=4).map(|v| Tensor::new(&[1, 1, 1, 1], vec![v as f64])).collect();
        let x = assemble(&p, &grid(2, 2)).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn assemble_rejects_mixed_shapes() {
        let p = vec![
            Tensor::zeros(&[1, 1, 2, 2]),
            Tensor::zeros(&[1, 1, 2, 3]),
            Tensor::zeros(&[1, 1, 2, 2]),
            Tensor::zeros(&[1, 1, 2, 2]),
        ];
        assert!(matches!(assemble(&p, &grid(2, 2)), Err(Error::Geometry { .. })));
    }

    #[test]
    fn split_constant_gives_constant_patches() {
        let x = Tensor::full(&[2, 3, 6, 6], 0.25);
        for p in split(&x, &grid(3, 3)).unwrap() {
            assert!(p.data().iter().all(|&v| v == 0.25));
            assert_eq!(p.shape(), &[2, 3, 2, 2]);
        }
    }

    #[test]
    fn indivisible_height_names_axis() {
        let img = Tensor::zeros(&[1, 3, 10, 9]);
        let err = decompose(&img, &grid(3, 3)).unwrap_err();
        match err {
            Error::Geometry { axis, .. } => assert_eq!(axis, "height"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decompose_paper_scale_shapes() {
        let img = Tensor::zeros(&[1, 3, 1024, 1024]);
        let g = PatchGrid::for_image(1024, 1024, 2, 2).unwrap();
        let v = decompose(&img, &g).unwrap();
        assert_eq!(v.global_view.shape(), &[1, 3, 512, 512]);
        assert_eq!(v.local_views.len(), 4);
        assert!(v.local_views.iter().all(|l| l.shape() == [1, 3, 512, 512]));
    }

    #[test]
    fn var_split_matches_tensor_split() {
        let x = Tensor::new(&[1, 2, 4, 6], (0..48).map(f64::from).collect());
        let g = grid(2, 3);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let parts = split_var(&mut tape, v, &g).unwrap();
        let expect = split(&x, &g).unwrap();
        for (p, e) in parts.iter().zip(&expect) {
            assert_eq!(tape.value(*p), e);
        }
        let back = assemble_var(&mut tape, &parts, &g).unwrap();
        assert_eq!(tape.value(back), &x);
    }
}
