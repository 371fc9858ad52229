#include <cstdlib>
#include <string>

#include "milr/errors.hpp"
#include "milr/kernels.hpp"

namespace milr::kernels {

bool avx2_available();

bool supported(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
      return avx2_available();
  }
  return false;
}

const KernelTable& table(Isa isa) {
  if (!supported(isa)) {
    throw ContractError("kernel ISA not supported on this CPU");
  }
  return isa == Isa::avx2 ? avx2_table() : scalar_table();
}

namespace {

const KernelTable& select() {
  const char* env = std::getenv("MILR_KERNELS");
  const std::string choice = env ? env : "auto";
  if (choice == "scalar") return scalar_table();
  if (choice == "avx2") return table(Isa::avx2);
  if (choice != "auto") {
    throw ConfigError("MILR_KERNELS must be one of auto, scalar, avx2; got '" +
                      choice + "'");
  }
  return supported(Isa::avx2) ? avx2_table() : scalar_table();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& t = select();
  return t;
}

}  // namespace milr::kernels
