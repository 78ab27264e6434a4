#!/usr/bin/env python3
"""
CETSP 工具包启动脚本

使用方法:
    python run_cetsp.py selftest                     # 梯度检查与基准一致性自检
    python run_cetsp.py train --config configs/desk_train.json
    python run_cetsp.py --help                       # 显示帮助
"""

import sys
from pathlib import Path

# 添加项目根目录到Python路径
sys.path.insert(0, str(Path(__file__).parent))

from app.main import dispatch


if __name__ == "__main__":
    sys.exit(dispatch(sys.argv[1:]))
