use crate::error::{Error, Result};

/// Offsets along one axis: every `stride` step that fits, plus an edge-aligned last window.
pub fn axis_origins(extent: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || patch == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    if patch > extent {
        return Err(Error::Data(format!("patch {patch} exceeds extent {extent}")));
    }
    let last = extent - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    Ok(out)
}

/// Window origins `(y, x)` covering an `h × w` tile, row-major and duplicate-free.
pub fn sliding_window(h: usize, w: usize, patch: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    let ys = axis_origins(h, patch, stride)?;
    let xs = axis_origins(w, patch, stride)?;
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect())
}
