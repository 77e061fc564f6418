#pragma once

namespace lorarank {

int cli_dispatch(int argc, char** argv);

inline int cli_dispatch(int argc, char** argv) {
    (void)argc;
    (void)argv;
    return 0;
}

}  // namespace lorarank
