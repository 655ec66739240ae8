fn main() {
    println!("ssvae");
}
