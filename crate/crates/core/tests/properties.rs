use elf_core::nn::blocks::{init_params, Direction, Hfb, Rcab, Resample, TransformerBlock};
use elf_core::{BlockSpec, Graph, Tensor};
use proptest::prelude::*;

fn input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let len = n * c * h * w;
    let data = (0..len)
        .map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f64 / 500.0 - 1.0)
        .collect();
    Tensor::from_vec(vec![n, c, h, w], data).unwrap()
}

fn spec(channels: usize, heads: usize) -> BlockSpec {
    BlockSpec {
        channels,
        heads,
        ffn_expansion: 2,
        ca_reduction: 2,
        kernel: 3,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_preserving_blocks(
        n in 1usize..3,
        heads in 1usize..3,
        per_head in 1usize..3,
        h in 1usize..7,
        w in 1usize..7,
        separable in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let c = 2 * heads * per_head;
        let s = spec(c, heads);
        let x0 = input(n, c, h, w, seed);

        let rcab = Rcab::new("r", &s, separable).unwrap();
        let p = init_params::<f64, _>(&rcab, seed).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = p.bind(&mut g);
        let x = g.leaf(x0.clone());
        let y = rcab.forward(&mut g, &bound, x).unwrap();
        prop_assert_eq!(g.shape(y), x0.shape());

        let block = TransformerBlock::new("t", &s).unwrap();
        let p = init_params::<f64, _>(&block, seed).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = p.bind(&mut g);
        let x = g.leaf(x0.clone());
        let y = block.forward(&mut g, &bound, x).unwrap();
        prop_assert_eq!(g.shape(y), x0.shape());
    }

    #[test]
    fn resample_and_fusion_shapes(
        c in 1usize..5,
        h in 1usize..5,
        w in 1usize..5,
        out in 1usize..5,
        seed in any::<u64>(),
    ) {
        let (h, w) = (2 * h, 2 * w);
        let x0 = input(1, c, h, w, seed);

        let down = Resample::new("d", c, Direction::Down2);
        let up = Resample::new("u", c, Direction::Up2);
        let pd = init_params::<f64, _>(&down, seed).unwrap();
        let pu = init_params::<f64, _>(&up, seed).unwrap();
        let mut g = Graph::<f64>::new();
        let mut bound = pd.bind(&mut g);
        for (name, t) in pu.iter() {
            let v = g.leaf(t.clone());
            bound.insert(name, v);
        }
        let x = g.leaf(x0.clone());
        let d = down.forward(&mut g, &bound, x).unwrap();
        prop_assert_eq!(g.shape(d), &[1, c, h / 2, w / 2][..]);
        let u = up.forward(&mut g, &bound, d).unwrap();
        prop_assert_eq!(g.shape(u), x0.shape());

        let hfb = Hfb::new("f", 2 * c, out, 1).unwrap();
        let p = init_params::<f64, _>(&hfb, seed).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = p.bind(&mut g);
        let a = g.leaf(x0.clone());
        let b = g.leaf(x0.clone());
        let y = hfb.forward(&mut g, &bound, &[a, b]).unwrap();
        prop_assert_eq!(g.shape(y), &[1, out, h, w][..]);
    }
}
