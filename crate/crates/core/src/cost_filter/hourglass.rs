//! 3-D hourglass: three stride-2 dense downsampling blocks, three
//! upsampling blocks with additive skips, APC blocks everywhere else.

use super::apc::ApcBlock;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3d, Init, Mode};
use crate::tensor::{trilinear_resize, Element, Tensor};

/// Smallest extent along each volume axis that survives three halvings.
pub const MIN_EXTENT: usize = 8;

/// Dense 3x3x3 convolution, batch norm, relu.
pub struct ConvBn3d<T: Element> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Element> ConvBn3d<T> {
    pub fn new(init: &Init<T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let s = init.sub(name);
        ConvBn3d {
            conv: Conv3d::new(&s, "conv", cin, cout, [3, 3, 3], [stride; 3], false),
            bn: BatchNorm::new(&s, "bn", cout),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu())
    }
}

pub struct Hourglass<T: Element> {
    stem: ApcBlock<T>,
    downs: Vec<(ConvBn3d<T>, ApcBlock<T>)>,
    ups: Vec<(ConvBn3d<T>, ApcBlock<T>)>,
    pub widths: [usize; 3],
}

impl<T: Element> Hourglass<T> {
    /// Level widths: full-res and 1/2 use `widths[0]`, 1/4 `widths[1]`, 1/8 `widths[2]`.
    pub fn new(init: &Init<T>, cin: usize, widths: [usize; 3], ks: usize, kd: usize) -> Result<Self> {
        let s = init.sub("hourglass");
        let lw = [widths[0], widths[0], widths[1], widths[2]];
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        for i in 0..3 {
            downs.push((
                ConvBn3d::new(&s, &format!("down{i}"), lw[i], lw[i + 1], 2),
                ApcBlock::new(&s, &format!("down{i}.apc"), lw[i + 1], lw[i + 1], ks, kd)?,
            ));
        }
        for i in (0..3).rev() {
            ups.push((
                ConvBn3d::new(&s, &format!("up{i}"), lw[i + 1], lw[i], 1),
                ApcBlock::new(&s, &format!("up{i}.apc"), lw[i], lw[i], ks, kd)?,
            ));
        }
        Ok(Hourglass {
            stem: ApcBlock::new(&s, "stem", cin, widths[0], ks, kd)?,
            downs,
            ups,
            widths,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.widths[0]
    }

    pub fn forward(&self, v: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if v.rank() != 5 {
            return Err(Error::dim("hourglass", "rank", format!("expected [N, C, D, H, W], got {:?}", v.shape())));
        }
        for (ax, name) in ["disparity", "height", "width"].iter().enumerate() {
            if v.shape()[2 + ax] < MIN_EXTENT {
                return Err(Error::Config(format!(
                    "hourglass needs at least {MIN_EXTENT} bins along the {name} axis, got {}",
                    v.shape()[2 + ax]
                )));
            }
        }
        let mut skips = vec![self.stem.forward(v, mode)?];
        for (down, apc) in &self.downs {
            let x = apc.forward(&down.forward(skips.last().unwrap(), mode)?, mode)?;
            skips.push(x);
        }
        let mut x = skips.pop().unwrap();
        for (up, apc) in &self.ups {
            let skip = skips.pop().unwrap();
            let s = skip.shape();
            let y = trilinear_resize(&up.forward(&x, mode)?, [s[2], s[3], s[4]])?;
            x = apc.forward(&y.add(&skip)?, mode)?;
        }
        Ok(x)
    }
}
