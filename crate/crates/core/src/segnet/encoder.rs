use super::{dims3, Net, STAGE_STRIDES};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Stage outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub f: [Var; 4],
}

/// Each stage is a strided embedding convolution (7×7/4 for the first,
/// 3×3/2 after) followed by residual 3×3 blocks, all with normalization and
/// GELU. The input side lengths must be multiples of 32.
pub fn encoder_forward(net: &mut Net, x: Var) -> Result<EncoderFeatures> {
    let (c, h, w) = dims3(net.tape.shape(x))?;
    if c != 3 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::contract(
            "encoder_forward",
            format!("input [{c},{h},{w}] must be 3-channel with sides divisible by 32"),
        ));
    }
    let blocks = net.model().encoder.blocks;
    let mut f = [x; 4];
    let mut cur = x;
    for (s, slot) in f.iter_mut().enumerate() {
        let (k_stride, pad) = if s == 0 { (4, 3) } else { (2, 1) };
        let y = net.conv_bn(cur, &format!("enc.s{s}.embed"), k_stride, pad)?;
        cur = net.tape.gelu(y)?;
        for b in 0..blocks {
            let y = net.conv_bn(cur, &format!("enc.s{s}.b{b}"), 1, 1)?;
            let y = net.tape.gelu(y)?;
            cur = net.tape.add(cur, y)?;
        }
        debug_assert_eq!(net.tape.shape(cur)[1], h / STAGE_STRIDES[s]);
        *slot = cur;
    }
    Ok(EncoderFeatures { f })
}
