//! Desk-scale networks: the frozen multi-scale feature encoder E (a stand-in
//! for a pretrained backbone), the encoder–decoder generator G, and the
//! patch discriminator D. All convolutions are 3×3, stride 1, same-padded;
//! spatial reduction is a separate 2×2 average-pool stage so every shape in
//! the stack stays exactly divisible. Parameters are registered in a fixed
//! order so checkpoints are deterministic.

use crate::error::{PgeError, Result};
use crate::params::{he_scale, uniform_init, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};
use rand::Rng;

/// Channel widths of the three encoder taps.
pub const ENCODER_CHANNELS: [usize; 3] = [32, 64, 64];
/// Per-block downsampling factors of the encoder (cumulative 2, 4, 4).
pub const ENCODER_STRIDES: [usize; 3] = [2, 2, 1];

/// One stride-1 conv + bias unit.
struct Conv {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

impl Conv {
    fn init(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        trainable: bool,
        in_c: usize,
        out_c: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = he_scale(in_c * k * k);
        // Nonzero bias init keeps dead-region pre-activations off the exact
        // relu kink, which finite-difference checks would otherwise straddle.
        let b_scale = 1.0 / ((in_c * k * k) as f64).sqrt();
        Self {
            w: store.register(
                &format!("{name}.weight"),
                uniform_init(rng, &[out_c, in_c, k, k], scale),
                group,
                trainable,
            ),
            b: store.register(
                &format!("{name}.bias"),
                uniform_init(rng, &[out_c], b_scale),
                group,
                trainable,
            ),
            pad: k / 2,
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId> {
        let y = tape.conv2d(x, bound.id(self.w), 1, self.pad)?;
        tape.channel_bias(y, bound.id(self.b))
    }
}

/// Frozen feature extractor with three tap points at overall strides 2, 4, 4.
/// Weights are seeded-random and never receive gradient.
pub struct Encoder {
    blocks: Vec<Conv>,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::new();
        let mut in_c = 3;
        for (i, &out_c) in ENCODER_CHANNELS.iter().enumerate() {
            blocks.push(Conv::init(
                store,
                &format!("encoder.conv{i}"),
                ParamGroup::Encoder,
                false,
                in_c,
                out_c,
                3,
                rng,
            ));
            in_c = out_c;
        }
        Self { blocks }
    }

    /// The three intermediate maps, each taken after its block's
    /// conv → rectifier → (optional) stride-2 downsample.
    pub fn taps(&self, tape: &mut Tape, bound: &Bound, image: TensorId) -> Result<Vec<TensorId>> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(PgeError::Shape(format!(
                "encoder needs [c,h,w] with h,w divisible by 4, got {shape:?}"
            )));
        }
        let mut taps = Vec::with_capacity(self.blocks.len());
        let mut x = image;
        for (block, &stride) in self.blocks.iter().zip(ENCODER_STRIDES.iter()) {
            x = block.apply(tape, bound, x)?;
            x = tape.relu(x);
            if stride == 2 {
                x = tape.avgpool2x(x)?;
            }
            taps.push(x);
        }
        Ok(taps)
    }
}

/// Encoder–decoder generator: stem, two downsampling blocks, residual
/// bottleneck, two nearest-upsample+conv blocks, and a tanh-bounded output
/// head, mapping [3,h,w] → [3,h,w] within [−1,1].
pub struct Generator {
    stem: Conv,
    down: Vec<Conv>,
    res: Vec<(Conv, Conv)>,
    up: Vec<Conv>,
    head: Conv,
}

impl Generator {
    pub fn init(store: &mut ParamStore, width: usize, res_blocks: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Generator;
        let (w1, w2, w4) = (width, 2 * width, 4 * width);
        let stem = Conv::init(store, "generator.stem", g, true, 3, w1, 3, rng);
        let down = vec![
            Conv::init(store, "generator.down0", g, true, w1, w2, 3, rng),
            Conv::init(store, "generator.down1", g, true, w2, w4, 3, rng),
        ];
        let res = (0..res_blocks)
            .map(|i| {
                (
                    Conv::init(store, &format!("generator.res{i}.a"), g, true, w4, w4, 3, rng),
                    Conv::init(store, &format!("generator.res{i}.b"), g, true, w4, w4, 3, rng),
                )
            })
            .collect();
        let up = vec![
            Conv::init(store, "generator.up0", g, true, w4, w2, 3, rng),
            Conv::init(store, "generator.up1", g, true, w2, w1, 3, rng),
        ];
        let head = Conv::init(store, "generator.head", g, true, w1, 3, 3, rng);
        Self {
            stem,
            down,
            res,
            up,
            head,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: TensorId) -> Result<TensorId> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 || shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(PgeError::Shape(format!(
                "generator needs [3,h,w] with h,w divisible by 4, got {shape:?}"
            )));
        }
        let mut x = self.stem.apply(tape, bound, image)?;
        x = tape.relu(x);
        for d in &self.down {
            x = tape.avgpool2x(x)?;
            x = d.apply(tape, bound, x)?;
            x = tape.relu(x);
        }
        for (a, b) in &self.res {
            let inner = a.apply(tape, bound, x)?;
            let inner = tape.relu(inner);
            let inner = b.apply(tape, bound, inner)?;
            x = tape.add(x, inner)?;
        }
        for u in &self.up {
            x = tape.upsample2x(x)?;
            x = u.apply(tape, bound, x)?;
            x = tape.relu(x);
        }
        let pre = self.head.apply(tape, bound, x)?;
        Ok(tape.tanh(pre))
    }
}

/// Patch discriminator: two downsampling blocks then a 1-channel score conv,
/// emitting a 1×h'×w' map with h' = h/4 (> 1 for default image sizes).
pub struct Discriminator {
    layers: Vec<Conv>,
}

impl Discriminator {
    pub fn init(store: &mut ParamStore, width: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Discriminator;
        let layers = vec![
            Conv::init(store, "disc.conv0", g, true, 3, width, 3, rng),
            Conv::init(store, "disc.conv1", g, true, width, 2 * width, 3, rng),
            Conv::init(store, "disc.conv2", g, true, 2 * width, 1, 3, rng),
        ];
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: TensorId) -> Result<TensorId> {
        let mut x = image;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(tape, bound, x)?;
            if i != last {
                x = tape.relu(x);
                x = tape.avgpool2x(x)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_init(&mut rng, &[3, size, size], 1.0)
    }

    #[test]
    fn encoder_tap_shapes_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::init(&mut store, &mut rng);
        let img = random_image(64, 0);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let image = tape.constant(img.clone());
        let taps = enc.taps(&mut tape, &bound, image).unwrap();
        assert_eq!(tape.value(taps[0]).shape(), &[32, 32, 32]);
        assert_eq!(tape.value(taps[1]).shape(), &[64, 16, 16]);
        assert_eq!(tape.value(taps[2]).shape(), &[64, 16, 16]);

        let mut tape2 = Tape::new();
        let bound2 = store.bind(&mut tape2, |_| false);
        let image2 = tape2.constant(img);
        let taps2 = enc.taps(&mut tape2, &bound2, image2).unwrap();
        for (a, b) in taps.iter().zip(&taps2) {
            assert_eq!(tape.value(*a).data(), tape2.value(*b).data());
        }
    }

    #[test]
    fn generator_shape_and_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = Generator::init(&mut store, 8, 1, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let image = tape.constant(random_image(16, 1));
        let out = gen.forward(&mut tape, &bound, image).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 16, 16]);
        assert!(tape
            .value(out)
            .data()
            .iter()
            .all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn discriminator_patch_map_is_spatial() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let disc = Discriminator::init(&mut store, 8, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let image = tape.constant(random_image(64, 2));
        let out = disc.forward(&mut tape, &bound, image).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 16, 16]);
    }

    #[test]
    fn generator_gradients_reach_parameters() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gen = Generator::init(&mut store, 4, 1, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |g| g == ParamGroup::Generator);
        let image = tape.constant(random_image(16, 3));
        let out = gen.forward(&mut tape, &bound, image).unwrap();
        let loss = tape.mean(out);
        tape.backward(loss).unwrap();
        let stem_grad = tape.grad(bound.id(gen.stem.w)).unwrap();
        assert!(stem_grad.iter().any(|&g| g != 0.0));
    }
}
