//! 2 × 2 spatial patchification of latent grids.

use candle_core::{Device, Tensor};

use crate::dit::config::PATCH;
use crate::error::{Error, Result};

/// Tokens on a `(T', H', W')` grid. `tokens` is `(N, D)` or `(B, N, D)`.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub coords: Vec<[usize; 3]>,
    pub dims: [usize; 3],
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Row-major `(t, h, w)` coordinates of a grid.
pub fn grid_coords(dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for t in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                out.push([t, h, w]);
            }
        }
    }
    out
}

/// Token grid dimensions for a latent grid of shape `(U, h, w, _)`.
pub fn token_dims(units: usize, h: usize, w: usize) -> Result<[usize; 3]> {
    if h % PATCH != 0 {
        return Err(Error::dim("height", format!("latent height {h} is not divisible by {PATCH}")));
    }
    if w % PATCH != 0 {
        return Err(Error::dim("width", format!("latent width {w} is not divisible by {PATCH}")));
    }
    Ok([units, h / PATCH, w / PATCH])
}

/// `(U, h, w, C)` or `(B, U, h, w, C)` latents to raw patches of width `4·C`.
pub fn patchify(latents: &Tensor) -> Result<TokenGrid> {
    let (batch, u, h, w, c) = match *latents.dims() {
        [u, h, w, c] => (None, u, h, w, c),
        [b, u, h, w, c] => (Some(b), u, h, w, c),
        _ => return Err(Error::dim("rank", format!("expected rank 4 or 5 latents, got {:?}", latents.dims()))),
    };
    let dims = token_dims(u, h, w)?;
    let b = batch.unwrap_or(1);
    let (h2, w2) = (dims[1], dims[2]);
    let x = latents
        .reshape((b * u, h2, PATCH, w2, PATCH, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?;
    let n = u * h2 * w2;
    let d = PATCH * PATCH * c;
    let tokens = match batch {
        Some(b) => x.reshape((b, n, d))?,
        None => x.reshape((n, d))?,
    };
    Ok(TokenGrid {
        tokens,
        coords: grid_coords(dims),
        dims,
    })
}

/// Inverse of [`patchify`]. Tokens may be in any order; placement follows `coords`.
pub fn unpatchify(grid: &TokenGrid, c: usize) -> Result<Tensor> {
    let n: usize = grid.dims.iter().product();
    if grid.coords.len() != n {
        return Err(Error::dim("tokens", format!("{} coords for a grid of {n}", grid.coords.len())));
    }
    let (batch, tokens) = match grid.tokens.rank() {
        2 => (None, grid.tokens.unsqueeze(0)?),
        3 => (Some(grid.tokens.dims()[0]), grid.tokens.clone()),
        _ => return Err(Error::dim("rank", "tokens must be rank 2 or 3")),
    };
    let (b, tn, d) = tokens.dims3()?;
    if tn != n {
        return Err(Error::dim("tokens", format!("{tn} tokens for a grid of {n}")));
    }
    if d != PATCH * PATCH * c {
        return Err(Error::dim("channels", format!("token width {d} != {}·{c}", PATCH * PATCH)));
    }
    // source[i] = which input token lands at row-major slot i
    let mut source = vec![u32::MAX; n];
    let [gt, gh, gw] = grid.dims;
    for (i, &[t, h, w]) in grid.coords.iter().enumerate() {
        if t >= gt || h >= gh || w >= gw {
            return Err(Error::dim("coords", format!("coordinate {:?} outside grid {:?}", [t, h, w], grid.dims)));
        }
        let slot = (t * gh + h) * gw + w;
        if source[slot] != u32::MAX {
            return Err(Error::dim("coords", format!("coordinate {:?} appears twice", [t, h, w])));
        }
        source[slot] = i as u32;
    }
    let identity = source.iter().enumerate().all(|(i, &s)| s as usize == i);
    let ordered = if identity {
        tokens
    } else {
        let idx = Tensor::from_vec(source, n, &Device::Cpu)?;
        tokens.index_select(&idx, 1)?
    };
    let x = ordered
        .reshape((b * gt, gh, gw, PATCH, PATCH, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?;
    let (h, w) = (gh * PATCH, gw * PATCH);
    Ok(match batch {
        Some(b) => x.reshape((b, gt, h, w, c))?,
        None => x.reshape((gt, h, w, c))?,
    })
}
