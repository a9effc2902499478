//! Optimal one-to-one assignment of targets to queries.

use vidground::matching::assign;

fn main() -> vidground::Result<()> {
    // cost[query][target]
    let cost = vec![
        vec![4.0, 1.0, 3.0],
        vec![2.0, 0.0, 5.0],
        vec![3.0, 2.0, 2.0],
        vec![1.0, 4.0, 4.0],
    ];
    let queries = assign(&cost)?;
    let total: f64 = queries.iter().enumerate().map(|(t, &q)| cost[q][t]).sum();
    for (t, q) in queries.iter().enumerate() {
        println!("target {t} -> query {q}");
    }
    println!("total cost {total}");

    // a single target picks the cheapest query; ties go to the lowest index
    println!("single target -> query {}", assign(&[vec![2.0], vec![1.0], vec![1.0]])?[0]);
    Ok(())
}
