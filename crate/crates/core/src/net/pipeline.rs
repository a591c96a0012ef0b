//! Streaming execution of a pipeline block. Each child runs as its own stage
//! and passes row chunks to the next through a bounded queue, so the block's
//! intermediate results never exist as whole tensors.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};

use crate::reference::{pool_plane_rows, relu_in_place, PoolSpec};
use crate::tensor::Shape;
use crate::winograd::WinogradConv;

pub(crate) enum StageOp<'a> {
    Conv(&'a WinogradConv),
    Relu,
    Pool(PoolSpec),
}

pub(crate) struct Stage<'a> {
    pub op: StageOp<'a>,
    /// Per-image input and output shapes; `n` is ignored.
    pub input: Shape,
    pub output: Shape,
}

/// Rows `row .. row + rows` of every channel of one image, channel-major.
struct Chunk {
    image: usize,
    row: usize,
    rows: usize,
    data: Vec<f32>,
}

/// Run `n` images stored contiguously in `input` through `stages`, with at
/// most `depth` chunks queued between neighbouring stages.
pub(crate) fn stream(stages: &[Stage<'_>], input: &[f32], n: usize, depth: usize) -> Vec<f32> {
    let first = stages.first().expect("pipeline has stages");
    let last = stages.last().expect("pipeline has stages");
    let (c, h, w) = (first.input.c, first.input.h, first.input.w);
    let out_len = last.output.image_len();
    let mut out = vec![0.0f32; n * out_len];

    std::thread::scope(|s| {
        let (tx, mut rx) = sync_channel::<Chunk>(depth);
        s.spawn(move || {
            // One tile row (two input rows) per message.
            for (b, image) in input.chunks_exact(c * h * w).enumerate() {
                for row in (0..h).step_by(2) {
                    let rows = (h - row).min(2);
                    let mut data = Vec::with_capacity(c * rows * w);
                    for ch in 0..c {
                        let plane = &image[ch * h * w..(ch + 1) * h * w];
                        data.extend_from_slice(&plane[row * w..(row + rows) * w]);
                    }
                    if tx.send(Chunk { image: b, row, rows, data }).is_err() {
                        return;
                    }
                }
            }
        });
        for stage in stages {
            let (tx, next) = sync_channel::<Chunk>(depth);
            s.spawn(move || run_stage(stage, rx, tx));
            rx = next;
        }
        let (oc, oh, ow) = (last.output.c, last.output.h, last.output.w);
        for chunk in rx {
            let dst = &mut out[chunk.image * out_len..(chunk.image + 1) * out_len];
            for ch in 0..oc {
                let src = &chunk.data[ch * chunk.rows * ow..(ch + 1) * chunk.rows * ow];
                let start = ch * oh * ow + chunk.row * ow;
                dst[start..start + chunk.rows * ow].copy_from_slice(src);
            }
        }
    });
    out
}

fn run_stage(stage: &Stage<'_>, rx: Receiver<Chunk>, tx: SyncSender<Chunk>) {
    let (c, h, w) = (stage.input.c, stage.input.h, stage.input.w);
    match &stage.op {
        StageOp::Relu => {
            for mut chunk in rx {
                relu_in_place(&mut chunk.data);
                if tx.send(chunk).is_err() {
                    return;
                }
            }
        }
        StageOp::Conv(conv) => {
            let mut image = vec![0.0f32; c * h * w];
            let mut scratch = conv.scratch(w);
            let strips = WinogradConv::strips(h);
            let mut next = 0;
            for chunk in rx {
                let have = store_rows(&mut image, h, w, &chunk);
                // Strip i needs input rows up to 2i + 2.
                while next < strips && have >= (2 * next + 3).min(h) {
                    let data = conv.forward_strip(&image, h, w, next, &mut scratch);
                    let rows = (h - 2 * next).min(2);
                    let out = Chunk {
                        image: chunk.image,
                        row: 2 * next,
                        rows,
                        data,
                    };
                    if tx.send(out).is_err() {
                        return;
                    }
                    next += 1;
                }
                if have == h {
                    next = 0;
                }
            }
        }
        StageOp::Pool(spec) => {
            let (oh, ow) = (stage.output.h, stage.output.w);
            let mut image = vec![0.0f32; c * h * w];
            let mut next = 0;
            for chunk in rx {
                let have = store_rows(&mut image, h, w, &chunk);
                let mut end = next;
                while end < oh && end * spec.stride + spec.window <= have {
                    end += 1;
                }
                if end > next {
                    let mut data = Vec::with_capacity(c * (end - next) * ow);
                    for ch in 0..c {
                        pool_plane_rows(&image[ch * h * w..(ch + 1) * h * w], w, spec, ow, next..end, &mut data);
                    }
                    let out = Chunk {
                        image: chunk.image,
                        row: next,
                        rows: end - next,
                        data,
                    };
                    if tx.send(out).is_err() {
                        return;
                    }
                    next = end;
                }
                if have == h {
                    next = 0;
                }
            }
        }
    }
}

/// Copy a chunk into the stage's image buffer; returns rows received so far.
fn store_rows(image: &mut [f32], h: usize, w: usize, chunk: &Chunk) -> usize {
    let c = image.len() / (h * w);
    for ch in 0..c {
        let src = &chunk.data[ch * chunk.rows * w..(ch + 1) * chunk.rows * w];
        let start = ch * h * w + chunk.row * w;
        image[start..start + chunk.rows * w].copy_from_slice(src);
    }
    chunk.row + chunk.rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{pool, relu, PoolMode};
    use crate::tensor::Tensor4D;
    use crate::winograd::Strategy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, s: Shape) -> Tensor4D {
        Tensor4D::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_relu_pool_stream_equals_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (h, w, window, stride, depth) in [(9, 7, 2, 2, 4), (8, 8, 3, 1, 1), (5, 6, 3, 2, 2), (1, 4, 1, 1, 1)] {
            let x = random(&mut rng, Shape::new(3, 2, h, w));
            let wt = random(&mut rng, Shape::new(4, 2, 3, 3));
            let conv = WinogradConv::new(&wt, Some(&[0.1, -0.2, 0.3, 0.0]), Strategy::PartialInPe).unwrap();
            let spec = PoolSpec { window, stride, mode: PoolMode::Max };
            let y = conv.forward(&x, None).unwrap();
            let want = pool(&relu(&y), &spec).unwrap();
            let stages = [
                Stage { op: StageOp::Conv(&conv), input: x.shape(), output: y.shape() },
                Stage { op: StageOp::Relu, input: y.shape(), output: y.shape() },
                Stage { op: StageOp::Pool(spec), input: y.shape(), output: want.shape() },
            ];
            let got = stream(&stages, x.data(), 3, depth);
            assert_eq!(got, want.data(), "{h}x{w} window {window} stride {stride}");
        }
    }

    #[test]
    fn two_convs_back_to_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, Shape::new(2, 3, 11, 6));
        let a = WinogradConv::new(&random(&mut rng, Shape::new(2, 3, 3, 3)), None, Strategy::FullInPe).unwrap();
        let b = WinogradConv::new(&random(&mut rng, Shape::new(5, 2, 3, 3)), None, Strategy::FullPreTransform).unwrap();
        let ya = a.forward(&x, None).unwrap();
        let yb = b.forward(&ya, None).unwrap();
        let stages = [
            Stage { op: StageOp::Conv(&a), input: x.shape(), output: ya.shape() },
            Stage { op: StageOp::Conv(&b), input: ya.shape(), output: yb.shape() },
        ];
        assert_eq!(stream(&stages, x.data(), 2, 4), yb.data());
    }
}
