//! Patch-based image and video discriminators, both conditioned on the
//! first frame by channel concatenation (channels 0–2 carry the first frame,
//! 3–5 the candidate).
//!
//! The image discriminator is a stride-2 convolutional stack over 6-channel
//! inputs ending in a 1-channel patch score map; the video discriminator
//! swaps in 3-d convolutions over (first frame tiled along time) ⊕ (frames
//! 2..N). All patch scores pass through a sigmoid; losses aggregate maps to
//! one scalar by mean before taking logs.

use crate::autodiff::{Scalar, Tape, Var};
use crate::autodiff::{conv2d_out_shape, conv3d_out_shape};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2dP, Conv3dP, ParamStore};
use rand_chacha::ChaCha12Rng;

const LEAK: f64 = 0.2;

/// 2-d patch discriminator over (x1 ⊕ xn).
pub struct ImageDisc {
    pub height: usize,
    pub width: usize,
    convs: Vec<Conv2dP>,
    head: Conv2dP,
}

impl ImageDisc {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        channels: &[usize],
        height: usize,
        width: usize,
    ) -> Self {
        assert!(!channels.is_empty(), "discriminator needs at least one conv");
        let mut convs = Vec::with_capacity(channels.len());
        let mut in_ch = 6;
        for (i, &out_ch) in channels.iter().enumerate() {
            convs.push(Conv2dP::declare(
                store,
                rng,
                &format!("{prefix}.c{i}"),
                in_ch,
                out_ch,
                3,
                2,
                1,
            ));
            in_ch = out_ch;
        }
        let head = Conv2dP::declare(store, rng, &format!("{prefix}.head"), in_ch, 1, 3, 1, 1);
        ImageDisc {
            height,
            width,
            convs,
            head,
        }
    }

    fn check_frame(&self, tape: &Tape<impl Scalar>, v: Var, what: &str) -> Result<()> {
        let s = tape.shape(v);
        if s.len() != 4 || s[1] != 3 || s[2] != self.height || s[3] != self.width {
            return Err(Error::Validation(format!(
                "{what} has shape {s:?}, expected (B, 3, {}, {})",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Patch score map in (0,1): (B, 1, h', w').
    pub fn score_map<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        x1: Var,
        xn: Var,
    ) -> Result<Var> {
        self.check_frame(tape, x1, "conditioning frame")?;
        self.check_frame(tape, xn, "candidate frame")?;
        if tape.shape(x1)[0] != tape.shape(xn)[0] {
            return Err(Error::Validation("batch sizes differ".into()));
        }
        let mut x = tape.concat(&[x1, xn], 1);
        for conv in &self.convs {
            x = tape.leaky_relu(conv.forward(tape, bind, x), LEAK);
        }
        Ok(tape.sigmoid(self.head.forward(tape, bind, x)))
    }

    /// Spatial size of the score map for this stack.
    pub fn map_shape(&self) -> (usize, usize) {
        let mut hw = (self.height, self.width);
        for _ in &self.convs {
            hw = conv2d_out_shape(hw, (3, 3), 2, 1);
        }
        conv2d_out_shape(hw, (3, 3), 1, 1)
    }
}

/// 3-d patch discriminator over (x1 tiled along time) ⊕ (x_2..x_N).
pub struct VideoDisc {
    pub height: usize,
    pub width: usize,
    convs: Vec<Conv3dP>,
    head: Conv3dP,
}

impl VideoDisc {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        channels: &[usize],
        height: usize,
        width: usize,
    ) -> Self {
        assert!(!channels.is_empty(), "discriminator needs at least one conv");
        let mut convs = Vec::with_capacity(channels.len());
        let mut in_ch = 6;
        for (i, &out_ch) in channels.iter().enumerate() {
            // First layer keeps time intact; later layers halve it, so short
            // horizons still leave a nonempty volume.
            let stride = if i == 0 { [1, 2, 2] } else { [2, 2, 2] };
            convs.push(Conv3dP::declare(
                store,
                rng,
                &format!("{prefix}.c{i}"),
                in_ch,
                out_ch,
                [3, 3, 3],
                stride,
                [1, 1, 1],
            ));
            in_ch = out_ch;
        }
        let head = Conv3dP::declare(
            store,
            rng,
            &format!("{prefix}.head"),
            in_ch,
            1,
            [3, 3, 3],
            [1, 1, 1],
            [1, 1, 1],
        );
        VideoDisc {
            height,
            width,
            convs,
            head,
        }
    }

    /// Patch score volume in (0,1): (B, 1, t', h', w') for frames (B,3,T,H,W).
    pub fn score_volume<T: Scalar>(
        &self,
        tape: &Tape<T>,
        bind: &Binding,
        x1: Var,
        frames: Var,
    ) -> Result<Var> {
        let s1 = tape.shape(x1);
        let sf = tape.shape(frames);
        if s1.len() != 4 || s1[1] != 3 || s1[2] != self.height || s1[3] != self.width {
            return Err(Error::Validation(format!(
                "conditioning frame has shape {s1:?}, expected (B, 3, {}, {})",
                self.height, self.width
            )));
        }
        if sf.len() != 5
            || sf[0] != s1[0]
            || sf[1] != 3
            || sf[3] != self.height
            || sf[4] != self.width
        {
            return Err(Error::Validation(format!(
                "candidate frames have shape {sf:?}, expected (B, 3, T, {}, {})",
                self.height, self.width
            )));
        }
        let cond = tape.repeat_time(x1, sf[2]);
        let mut x = tape.concat(&[cond, frames], 1);
        for conv in &self.convs {
            x = tape.leaky_relu(conv.forward(tape, bind, x), LEAK);
        }
        Ok(tape.sigmoid(self.head.forward(tape, bind, x)))
    }

    /// (t', h', w') of the score volume for a T-frame input.
    pub fn volume_shape(&self, t: usize) -> (usize, usize, usize) {
        let mut dhw = (t, self.height, self.width);
        for (i, _) in self.convs.iter().enumerate() {
            let stride = if i == 0 { [1, 2, 2] } else { [2, 2, 2] };
            dhw = conv3d_out_shape(dhw, (3, 3, 3), stride, [1, 1, 1]);
        }
        conv3d_out_shape(dhw, (3, 3, 3), [1, 1, 1], [1, 1, 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use ndarray::{ArrayD, IxDyn};

    fn rand_frames(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        let mut rng = stream_rng(seed, Stream::Init, 7);
        crate::nn::uniform_init(&mut rng, shape, 1.0)
    }

    #[test]
    fn zero_parameter_image_disc_scores_half() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(1, Stream::Init, 0);
        let disc = ImageDisc::declare(&mut store, &mut rng, "d", &[4, 4], 16, 16);
        for i in 0..store.len() {
            store.by_index_mut(i).fill(0.0);
        }
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let x1 = tape.constant(rand_frames(2, &[2, 3, 16, 16]));
        let xn = tape.constant(rand_frames(3, &[2, 3, 16, 16]));
        let map = disc.score_map(&tape, &bind, x1, xn).unwrap();
        assert!(tape.value(map).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn image_map_shape_matches_convolution_arithmetic() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(4, Stream::Init, 0);
        // Three stride-2 convs on 16×16 → 2×2 map.
        let disc = ImageDisc::declare(&mut store, &mut rng, "d", &[4, 4, 4], 16, 16);
        assert_eq!(disc.map_shape(), (2, 2));
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let x1 = tape.constant(rand_frames(5, &[1, 3, 16, 16]));
        let xn = tape.constant(rand_frames(6, &[1, 3, 16, 16]));
        let map = disc.score_map(&tape, &bind, x1, xn).unwrap();
        assert_eq!(tape.shape(map), vec![1, 1, 2, 2]);
    }

    #[test]
    fn image_scores_stay_strictly_inside_unit_interval() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(7, Stream::Init, 0);
        let disc = ImageDisc::declare(&mut store, &mut rng, "d", &[4, 8], 16, 16);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let x1 = tape.constant(rand_frames(8, &[3, 3, 16, 16]));
        let xn = tape.constant(rand_frames(9, &[3, 3, 16, 16]));
        let map = disc.score_map(&tape, &bind, x1, xn).unwrap();
        assert!(tape.value(map).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn image_disc_rejects_wrong_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(10, Stream::Init, 0);
        let disc = ImageDisc::declare(&mut store, &mut rng, "d", &[4], 16, 16);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let good = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 16, 16])));
        let bad = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 32, 32])));
        assert!(disc.score_map(&tape, &bind, good, bad).is_err());
        assert!(disc.score_map(&tape, &bind, bad, good).is_err());
    }

    #[test]
    fn zero_parameter_video_disc_scores_half() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(11, Stream::Init, 0);
        let disc = VideoDisc::declare(&mut store, &mut rng, "v", &[4, 4], 16, 16);
        for i in 0..store.len() {
            store.by_index_mut(i).fill(0.0);
        }
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let x1 = tape.constant(rand_frames(12, &[1, 3, 16, 16]));
        let frames = tape.constant(rand_frames(13, &[1, 3, 4, 16, 16]));
        let vol = disc.score_volume(&tape, &bind, x1, frames).unwrap();
        assert!(tape.value(vol).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn video_volume_shape_matches_convolution_arithmetic() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(14, Stream::Init, 0);
        let disc = VideoDisc::declare(&mut store, &mut rng, "v", &[4, 4], 16, 16);
        // T=4: layer0 stride (1,2,2) keeps time, layer1 halves it.
        assert_eq!(disc.volume_shape(4), (2, 4, 4));
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let x1 = tape.constant(rand_frames(15, &[1, 3, 16, 16]));
        let frames = tape.constant(rand_frames(16, &[1, 3, 4, 16, 16]));
        let vol = disc.score_volume(&tape, &bind, x1, frames).unwrap();
        assert_eq!(tape.shape(vol), vec![1, 1, 2, 4, 4]);

        // Two stride-(2,2,2) convs on a 4-frame clip leave time extent 1.
        let mut dhw = (4usize, 16usize, 16usize);
        for _ in 0..2 {
            dhw = conv3d_out_shape(dhw, (3, 3, 3), [2, 2, 2], [1, 1, 1]);
        }
        assert_eq!(dhw.0, 1);
    }

    #[test]
    fn conditioning_block_is_tiled_across_time() {
        // Channels 0–2 of the assembled input hold x1 at every time index.
        let tape = Tape::<f64>::new();
        let x1_val = rand_frames(17, &[2, 3, 8, 8]);
        let x1 = tape.constant(x1_val.clone());
        let tiled = tape.repeat_time(x1, 3);
        let v = tape.value(tiled);
        for b in 0..2 {
            for c in 0..3 {
                for t in 0..3 {
                    for y in 0..8 {
                        for x in 0..8 {
                            assert_eq!(v[[b, c, t, y, x]], x1_val[[b, c, y, x]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn video_disc_handles_single_frame_horizon() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(18, Stream::Init, 0);
        let disc = VideoDisc::declare(&mut store, &mut rng, "v", &[4, 4], 16, 16);
        let tape = Tape::<f64>::new();
        let bind = store.bind(&tape, false);
        let x1 = tape.constant(rand_frames(19, &[1, 3, 16, 16]));
        let frames = tape.constant(rand_frames(20, &[1, 3, 1, 16, 16]));
        let vol = disc.score_volume(&tape, &bind, x1, frames).unwrap();
        assert_eq!(tape.shape(vol), vec![1, 1, 1, 4, 4]);
        assert!(tape.value(vol).iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
