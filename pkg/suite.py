"""
Tiny runner so each test file can also be executed directly (`python test_losses.py`).
pytest ignores this module and collects the test_* functions on its own.
"""

import traceback
from typing import Callable, List, Tuple


def run_suite(title: str, tests: List[Tuple[str, Callable[[], None]]]) -> bool:
    """Run (name, fn) pairs, print a PASS/FAIL summary and return True if all passed"""
    print(f"🧪 {title}")
    print("=" * 50)

    results = {}
    for test_name, test_func in tests:
        try:
            print(f"\n🎯 Running: {test_name}")
            test_func()
            results[test_name] = True
        except KeyboardInterrupt:
            print("\n⚠️ Test interrupted by user")
            break
        except Exception as e:
            print(f"❌ {type(e).__name__}: {e}")
            traceback.print_exc()
            results[test_name] = False

    print("\n" + "=" * 50)
    print("📊 TEST RESULTS SUMMARY")
    print("=" * 50)
    for test_name, passed in results.items():
        status = "✅ PASS" if passed else "❌ FAIL"
        print(f"{test_name:.<40} {status}")

    passed_tests = sum(results.values())
    print(f"\nResults: {passed_tests}/{len(results)} tests passed")
    return passed_tests == len(tests)
