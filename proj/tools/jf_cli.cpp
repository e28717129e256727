// placeholder; full command set added with the pipeline modules
#include <iostream>

int main() {
  std::cout << "jf: no subcommand\n";
  return 2;
}
