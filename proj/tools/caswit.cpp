#include <iostream>

int main() {
  std::cout << "caswit: placeholder\n";
  return 0;
}
