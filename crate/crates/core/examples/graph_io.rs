//! Reading a label graph from its text form, listing the coarse groups and
//! writing it back.

use bgl::graph::LabelGraph;

const TEXT: &str = "\
# dishes -> cuisine, restaurant
k=6 m=2
sizes=3,2
1 1 1
2 1 2
3 2 1
4 2 2
5 3 1
6 3 2
";

fn main() {
    let graph = match LabelGraph::parse(TEXT) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("bad graph: {e}");
            std::process::exit(2);
        }
    };
    println!(
        "k={} m={} sizes={:?}",
        graph.k(),
        graph.m(),
        graph.coarse_sizes()
    );
    for j in 0..graph.m() {
        for g in graph.groups(j).unwrap() {
            let members: Vec<usize> = g.members.iter().map(|i| i + 1).collect();
            println!(
                "type {} class {}: fine {:?}",
                g.ty + 1,
                g.coarse + 1,
                members
            );
        }
    }
    print!("{}", graph.to_text());

    let broken = "k=2 m=1\nsizes=1\n1 1\n2 2\n";
    println!(
        "parsing an out-of-range parent: {}",
        LabelGraph::parse(broken).unwrap_err()
    );
}
