//! RMSProp with a plateau schedule on an elongated quadratic bowl.

use pedformer::tensor::{ParamStore, Tensor};
use pedformer::train::{PlateauSchedule, RmsProp};

fn main() -> pedformer::Result<()> {
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::row(&[2.0, -3.0]), 0.0)?;
    let mut opt = RmsProp::new(&store, 0.9, 1e-7);
    let mut schedule = PlateauSchedule::new(0.2, 5, 1e-4, 1e-7);
    let mut lr = 0.1;
    for epoch in 1..=60 {
        let theta = store.get(id).value.data().to_vec();
        let loss = theta[0] * theta[0] + 10.0 * theta[1] * theta[1];
        let grad = Tensor::row(&[2.0 * theta[0], 20.0 * theta[1]]);
        opt.step(&mut store, &[grad], lr);
        let next = schedule.observe(loss, lr);
        if next != lr || epoch % 10 == 0 {
            println!("epoch {epoch:>2}: loss {loss:.6}, lr {lr:.1e} -> {next:.1e}");
        }
        lr = next;
    }
    Ok(())
}
