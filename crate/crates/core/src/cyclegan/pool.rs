use rand::Rng;

use crate::autodiff::Tensor;
use crate::rng::Stream;

/// History of generated images shown to the discriminators.
#[derive(Debug, Clone)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Tensor<f32>>,
    rng: Stream,
}

impl ImagePool {
    pub fn new(capacity: usize, rng: Stream) -> Self {
        Self {
            capacity,
            images: Vec::with_capacity(capacity),
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Returns the image to train on for one fresh fake `[1, c, h, w]`.
    /// Until full, the fake is stored and returned. Afterwards, with
    /// probability ½ a random stored image is returned and replaced by the
    /// fake; otherwise the fake itself is returned.
    pub fn query_one(&mut self, fake: Tensor<f32>) -> Tensor<f32> {
        if self.capacity == 0 {
            return fake;
        }
        if self.images.len() < self.capacity {
            self.images.push(fake.clone());
            return fake;
        }
        if self.rng.random_bool(0.5) {
            let i = self.rng.random_range(0..self.images.len());
            std::mem::replace(&mut self.images[i], fake)
        } else {
            fake
        }
    }

    /// Applies `query_one` to every item of a batch.
    pub fn query(&mut self, fakes: &Tensor<f32>) -> Tensor<f32> {
        let [n, c, h, w] = fakes.shape();
        let per = c * h * w;
        let mut out = Vec::with_capacity(n * per);
        for item in fakes.data().chunks(per) {
            let t = Tensor::new([1, c, h, w], item.to_vec()).expect("finite fake");
            out.extend_from_slice(self.query_one(t).data());
        }
        Tensor::new([n, c, h, w], out).expect("finite pool output")
    }
}
