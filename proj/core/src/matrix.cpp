#include "caprese/matrix.hpp"

namespace caprese {

std::atomic<bool>& verification_mode_flag() {
    static std::atomic<bool> flag{false};
    return flag;
}

}  // namespace caprese
