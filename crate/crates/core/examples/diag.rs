use invrender::scenegen::load_dataset;
use invrender::trainer::TrainState;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dataset = load_dataset(std::path::Path::new(&args[1])).unwrap();
    let state = TrainState::load_checkpoint(std::path::Path::new(&args[2]), dataset).unwrap();
    println!("step {}", state.step);
    let pts = vec![[0.0,0.0,0.0],[0.0,0.0,0.5],[0.5,0.0,0.0],[0.0,0.5,0.0],[0.0,0.0,0.85],[0.0,0.0,1.2]];
    let s = invrender::mesh::field_sigma(&state.field, &state.store, &pts);
    for (p, v) in pts.iter().zip(&s) {
        println!("sigma({:?}) = {:.6}", p, v);
    }
}
