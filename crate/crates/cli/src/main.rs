fn main() {
    println!("lmdepth");
}
