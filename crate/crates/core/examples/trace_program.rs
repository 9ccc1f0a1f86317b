//! Traces a small two-slice program and prints its JSON, ready for
//! `flowpath run`.

use std::sync::Arc;

use flowpath::ids::ClientId;
use flowpath::ir::{serialize, CompiledFunction, Tracer};
use flowpath::resman::{SliceId, VirtualSlice};

fn main() {
    let mut t = Tracer::new(ClientId(0));
    let a = t.declare_slice(VirtualSlice {
        id: SliceId(0),
        shape: vec![8],
        island: None,
        exclusive: false,
    });
    let b = t.declare_slice(VirtualSlice {
        id: SliceId(1),
        shape: vec![8],
        island: None,
        exclusive: false,
    });
    let mb = 1 << 20;
    let embed = Arc::new(CompiledFunction::new("embed", 8, 200_000).with_io(&[mb], &[mb]));
    let layer = Arc::new(
        CompiledFunction::new("layer", 8, 800_000)
            .with_io(&[mb], &[mb])
            .collective(true),
    );
    let head = Arc::new(CompiledFunction::new("head", 8, 300_000).with_io(&[mb, mb], &[mb / 4]));

    let x = t.arg(8, mb);
    let h = t.call(&embed, a, &[x]).unwrap()[0];
    let h1 = t.call(&layer, a, &[h]).unwrap()[0];
    let h2 = t.call(&layer, b, &[h1]).unwrap()[0];
    let y = t.call(&head, b, &[h2, h1]).unwrap()[0];
    let p = t.finish(&[y]).unwrap();
    println!("{}", serialize(&p));
}
